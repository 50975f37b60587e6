"""Socket plumbing: UDP sockets with an optional send hook, and a small TCP transport.

The send hook is how the harness injects loss, delay and partitions and how
it captures traffic; production code never sets one.
"""

from __future__ import annotations

import asyncio
import logging
import re
from typing import Callable, Protocol

log = logging.getLogger(__name__)

Addr = tuple[str, int]


class TransportError(OSError):
    pass


class SendHook(Protocol):
    def transmit(self, sock: UdpSocket, data: bytes, addr: Addr) -> None: ...


class _Protocol(asyncio.DatagramProtocol):
    def __init__(self, owner: UdpSocket):
        self.owner = owner

    def datagram_received(self, data, addr):
        self.owner._deliver(data, (addr[0], addr[1]))

    def error_received(self, exc):
        # ICMP port unreachable on loopback shows up here; UDP is fire-and-forget
        log.debug("udp error on %s: %s", self.owner.local_addr, exc)


class UdpSocket:
    def __init__(self, on_datagram: Callable[[bytes, Addr], None] | None = None):
        self.on_datagram = on_datagram
        self.hook: SendHook | None = None
        self._transport: asyncio.DatagramTransport | None = None
        self.local_addr: Addr = ("0.0.0.0", 0)
        self.closed = False

    @classmethod
    async def open(
        cls,
        local_addr: Addr,
        on_datagram: Callable[[bytes, Addr], None] | None = None,
        hook: SendHook | None = None,
    ) -> UdpSocket:
        sock = cls(on_datagram)
        sock.hook = hook
        loop = asyncio.get_running_loop()
        try:
            transport, _ = await loop.create_datagram_endpoint(
                lambda: _Protocol(sock), local_addr=local_addr
            )
        except OSError as exc:
            raise TransportError(f"cannot bind {local_addr}: {exc}") from exc
        sock._transport = transport
        host, port = transport.get_extra_info("sockname")[:2]
        sock.local_addr = (host, port)
        return sock

    def send(self, data: bytes, addr: Addr) -> None:
        if self.closed:
            return
        if self.hook is not None:
            self.hook.transmit(self, data, addr)
        else:
            self.raw_send(data, addr)

    def raw_send(self, data: bytes, addr: Addr) -> None:
        if self.closed or self._transport is None:
            return
        self._transport.sendto(data, addr)

    def _deliver(self, data: bytes, addr: Addr) -> None:
        if not self.closed and self.on_datagram is not None:
            self.on_datagram(data, addr)

    def close(self) -> None:
        self.closed = True
        if self._transport is not None:
            self._transport.close()


_CL_RE = re.compile(rb"^(?:content-length|l)\s*:\s*(\d+)\s*$", re.I | re.M)


async def read_sip_frame(reader: asyncio.StreamReader) -> bytes:
    """Read one Content-Length framed SIP message from a stream."""
    head = await reader.readuntil(b"\r\n\r\n")
    while head in (b"\r\n\r\n",):  # keepalive CRLFs
        head = await reader.readuntil(b"\r\n\r\n")
    m = _CL_RE.search(head)
    length = int(m.group(1)) if m else 0
    body = await reader.readexactly(length) if length else b""
    return head + body


class TcpTransport:
    """Connection-reusing TCP transport; one listener, connections keyed by peer."""

    def __init__(self, on_message: Callable[[bytes, Addr], None]):
        self.on_message = on_message
        self._server: asyncio.base_events.Server | None = None
        self._writers: dict[Addr, asyncio.StreamWriter] = {}
        self._tasks: set[asyncio.Task] = set()
        self.local_addr: Addr = ("0.0.0.0", 0)

    async def listen(self, local_addr: Addr) -> None:
        try:
            self._server = await asyncio.start_server(self._accept, *local_addr)
        except OSError as exc:
            raise TransportError(f"cannot listen on {local_addr}: {exc}") from exc
        self.local_addr = self._server.sockets[0].getsockname()[:2]

    async def _accept(self, reader, writer):
        peer = writer.get_extra_info("peername")[:2]
        self._writers[peer] = writer
        await self._read_loop(peer, reader)

    async def _read_loop(self, peer: Addr, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                frame = await read_sip_frame(reader)
                self.on_message(frame, peer)
        except (asyncio.IncompleteReadError, ConnectionError, asyncio.LimitOverrunError):
            pass
        finally:
            writer = self._writers.pop(peer, None)
            if writer is not None:
                writer.close()

    def send(self, data: bytes, addr: Addr) -> None:
        writer = self._writers.get(addr)
        if writer is not None and not writer.is_closing():
            writer.write(data)
            return
        task = asyncio.get_running_loop().create_task(self._connect_and_send(data, addr))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    async def _connect_and_send(self, data: bytes, addr: Addr) -> None:
        try:
            reader, writer = await asyncio.open_connection(*addr)
        except OSError as exc:
            log.warning("tcp connect to %s failed: %s", addr, exc)
            return
        self._writers[addr] = writer
        writer.write(data)
        task = asyncio.get_running_loop().create_task(self._read_loop(addr, reader))
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)

    def close(self) -> None:
        for writer in self._writers.values():
            writer.close()
        self._writers.clear()
        for task in self._tasks:
            task.cancel()
        if self._server is not None:
            self._server.close()
