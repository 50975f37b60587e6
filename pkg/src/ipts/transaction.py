"""SIP transaction layer.

A :class:`SipEndpoint` owns one UDP socket (plus an optional TCP listener),
the transaction table and the retransmission timers. Everything that touches
the table runs on the endpoint's event loop, so there is no locking.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable

from .clock import AsyncioClock
from .net import Addr, TcpTransport, UdpSocket
from .sip import (
    HeaderField,
    ParseError,
    SipMessage,
    SipMethod,
    SipRequest,
    SipResponse,
    build_response,
    new_branch,
    parse_message,
    serialize_message,
)
from .sip.uri import MalformedUri

log = logging.getLogger(__name__)
trace_log = logging.getLogger("ipts.trace")


class DuplicateTransaction(KeyError):
    pass


@dataclass(frozen=True)
class TimerConfig:
    t1: float = 0.5
    retransmit_cap: float = 4.0
    tx_lifetime: float = 32.0
    # how long Completed/Confirmed states absorb retransmissions (T4)
    linger: float = 5.0

    def __post_init__(self):
        if self.t1 <= 0:
            raise ValueError("t1 must be positive")
        if self.retransmit_cap < self.t1:
            raise ValueError("retransmit_cap must be >= t1")

    def intervals(self):
        """Retransmission gaps: t1, 2*t1, 4*t1, ... capped."""
        gap = self.t1
        while True:
            yield gap
            gap = min(gap * 2, self.retransmit_cap)


@dataclass(frozen=True)
class TransactionKey:
    branch: str
    method: SipMethod


def transaction_key(msg: SipMessage) -> TransactionKey | None:
    """The key a message would belong to, before looking at the table."""
    try:
        branch = msg.branch
        if branch is None:
            return None
        if isinstance(msg, SipResponse):
            return TransactionKey(branch, msg.cseq[1])
        method = SipMethod.INVITE if msg.method == SipMethod.ACK else msg.method
        return TransactionKey(branch, method)
    except (ParseError, MalformedUri):
        return None


class State(str, enum.Enum):
    CALLING = "Calling"
    TRYING = "Trying"
    PROCEEDING = "Proceeding"
    COMPLETED = "Completed"
    CONFIRMED = "Confirmed"
    TERMINATED = "Terminated"


_ORDER = {
    State.CALLING: 0,
    State.TRYING: 0,
    State.PROCEEDING: 1,
    State.COMPLETED: 2,
    State.CONFIRMED: 3,
    State.TERMINATED: 4,
}


class _Transaction:
    def __init__(self, endpoint: SipEndpoint, key: TransactionKey, request: SipRequest,
                 transport: str):
        self.endpoint = endpoint
        self.key = key
        self.request = request
        self.transport = transport
        self.reliable = transport == "TCP"
        self.state = State.TRYING
        self.last_message: SipMessage = request
        self.created = endpoint.clock.time()
        self._timers: dict[str, object] = {}
        self._lifetime = endpoint.clock.call_later(
            endpoint.timers.tx_lifetime, self._on_lifetime
        )

    @property
    def is_invite(self) -> bool:
        return self.key.method == SipMethod.INVITE

    def _move(self, state: State) -> None:
        if _ORDER[state] < _ORDER[self.state]:
            raise RuntimeError(f"illegal transition {self.state} -> {state}")
        self.state = state
        if state == State.TERMINATED:
            self._cancel_all()
            self._lifetime.cancel()
            self.endpoint._remove(self)

    def _start(self, name: str, delay: float, callback) -> None:
        self._stop(name)
        self._timers[name] = self.endpoint.clock.call_later(delay, callback)

    def _stop(self, name: str) -> None:
        handle = self._timers.pop(name, None)
        if handle is not None:
            handle.cancel()

    def _cancel_all(self) -> None:
        for handle in self._timers.values():
            handle.cancel()
        self._timers.clear()

    def _remaining(self) -> float:
        return max(0.0, self.created + self.endpoint.timers.tx_lifetime - self.endpoint.clock.time())

    def _linger(self) -> None:
        if self.reliable:
            self._move(State.TERMINATED)
        else:
            delay = min(self.endpoint.timers.linger, self._remaining())
            self._start("linger", delay, lambda: self._move(State.TERMINATED))

    def _on_lifetime(self) -> None:
        if self.state != State.TERMINATED:
            self._expire()

    def _expire(self) -> None:
        self._move(State.TERMINATED)


class ServerTransaction(_Transaction):
    def __init__(self, endpoint, key, request, transport, reply_addr: Addr):
        super().__init__(endpoint, key, request, transport)
        self.reply_addr = reply_addr
        self.state = State.PROCEEDING if self.is_invite else State.TRYING
        self.last_response: SipResponse | None = None
        self.on_ack_timeout: Callable[[], None] | None = None

    def respond(self, resp: SipResponse) -> None:
        if self.state in (State.COMPLETED, State.CONFIRMED, State.TERMINATED):
            log.debug("dropping response %s on %s tx", resp.code, self.state.value)
            return
        self.last_response = resp
        self.last_message = resp
        self.endpoint.send_message(resp, self.reply_addr, self.transport)
        if resp.code < 200:
            if not self.is_invite:
                self._move(State.PROCEEDING)
            return
        if self.is_invite and resp.code < 300:
            # 2xx retransmission belongs to the dialog layer
            self._move(State.TERMINATED)
            return
        self._move(State.COMPLETED)
        if self.is_invite:
            if not self.reliable:
                self._schedule_resend(self.endpoint.timers.intervals())
            self._start("H", self._remaining(), self._on_no_ack)
        elif self.reliable:
            self._move(State.TERMINATED)
        else:
            # timer J: the client may retransmit for its whole lifetime
            self._start("J", self._remaining(), lambda: self._move(State.TERMINATED))

    def _schedule_resend(self, gaps) -> None:
        def fire():
            if self.state == State.COMPLETED and self.last_response is not None:
                self.endpoint.send_message(self.last_response, self.reply_addr, self.transport)
                self._schedule_resend(gaps)

        self._start("G", next(gaps), fire)

    def _on_no_ack(self) -> None:
        if self.on_ack_timeout:
            self.on_ack_timeout()
        self._move(State.TERMINATED)

    def _expire(self) -> None:
        # the lifetime and timer H end together; either way the ACK never came
        if self.is_invite and self.state == State.COMPLETED:
            self._on_no_ack()
        else:
            super()._expire()

    def receive_request(self, req: SipRequest) -> None:
        if req.method == SipMethod.ACK:
            if self.is_invite and self.state == State.COMPLETED:
                self._stop("G")
                self._stop("H")
                self._move(State.CONFIRMED)
                self._linger()
            return
        # retransmission: replay whatever we last said
        if self.last_response is not None and self.state in (
            State.PROCEEDING, State.COMPLETED
        ):
            self.endpoint.send_message(self.last_response, self.reply_addr, self.transport)


ResponseCallback = Callable[[SipResponse], None]


class ClientTransaction(_Transaction):
    def __init__(self, endpoint, key, request, transport, dest: Addr,
                 on_response: ResponseCallback):
        super().__init__(endpoint, key, request, transport)
        self.dest = dest
        self.on_response = on_response
        self.state = State.CALLING if self.is_invite else State.TRYING
        self.final: SipResponse | None = None
        self.ack: SipRequest | None = None
        self._cancel_pending = False
        self.cancel_tx: ClientTransaction | None = None

    def start(self) -> None:
        self.endpoint.send_message(self.request, self.dest, self.transport)
        if not self.reliable:
            self._schedule_resend(self.endpoint.timers.intervals())

    def _schedule_resend(self, gaps) -> None:
        def fire():
            if self.state in (State.CALLING, State.TRYING) or (
                not self.is_invite and self.state == State.PROCEEDING
            ):
                self.endpoint.send_message(self.request, self.dest, self.transport)
                self._schedule_resend(gaps)

        self._start("A", next(gaps), fire)

    def _expire(self) -> None:
        timed_out = self.final is None
        super()._expire()
        if timed_out:
            self.final = build_response(self.request, 408)
            self.on_response(self.final)

    def receive_response(self, resp: SipResponse) -> None:
        if self.state == State.TERMINATED:
            return
        if resp.code < 200:
            if self.state in (State.CALLING, State.TRYING):
                self._move(State.PROCEEDING)
                if self.is_invite:
                    self._stop("A")
                if self._cancel_pending:
                    self._send_cancel()
            if self.state == State.PROCEEDING:
                self.on_response(resp)
            return
        if self.state == State.COMPLETED:
            if self.is_invite and self.ack is not None:
                self.endpoint.send_message(self.ack, self.dest, self.transport)
            return
        self.final = resp
        self._stop("A")
        if self.is_invite and resp.code < 300:
            self._move(State.TERMINATED)
            self.on_response(resp)
            return
        if self.is_invite:
            self.ack = self._build_ack(resp)
            self.endpoint.send_message(self.ack, self.dest, self.transport)
        self._move(State.COMPLETED)
        self._linger()
        self.on_response(resp)

    def _build_ack(self, resp: SipResponse) -> SipRequest:
        req = self.request
        headers = [HeaderField("Via", req.header_values("Via")[0])]
        for name in ("From", "Call-ID"):
            headers.append(HeaderField(name, req.header(name)))
        headers.append(HeaderField("To", resp.header("To") or req.header("To")))
        headers.append(HeaderField("CSeq", f"{req.cseq[0]} ACK"))
        headers.extend(HeaderField("Route", r) for r in req.header_values("Route"))
        headers.append(HeaderField("Max-Forwards", "70"))
        return SipRequest(SipMethod.ACK, req.uri, tuple(headers))

    def cancel(self) -> None:
        """CANCEL a pending INVITE; deferred until a provisional has been seen."""
        if not self.is_invite or self.final is not None or self.cancel_tx is not None:
            return
        if self.state == State.CALLING:
            self._cancel_pending = True
        elif self.state == State.PROCEEDING:
            self._send_cancel()

    def _send_cancel(self) -> None:
        self._cancel_pending = False
        req = self.request
        headers = [HeaderField("Via", req.header_values("Via")[0])]
        for name in ("From", "To", "Call-ID"):
            headers.append(HeaderField(name, req.header(name)))
        headers.append(HeaderField("CSeq", f"{req.cseq[0]} CANCEL"))
        headers.extend(HeaderField("Route", r) for r in req.header_values("Route"))
        headers.append(HeaderField("Max-Forwards", "70"))
        cancel = SipRequest(SipMethod.CANCEL, req.uri, tuple(headers))
        self.cancel_tx = self.endpoint.create_client_tx(
            cancel, self.dest, lambda r: None, transport=self.transport
        )


class TransactionUser:
    """Callbacks an endpoint delivers to; subclasses override what they need."""

    def on_request(self, req: SipRequest, source: Addr, transport: str) -> None:
        pass

    def on_ack(self, req: SipRequest, source: Addr) -> None:
        pass

    def on_cancel(self, invite_tx: ServerTransaction, cancel: SipRequest) -> None:
        if invite_tx.state == State.PROCEEDING:
            invite_tx.respond(build_response(invite_tx.request, 487))

    def on_stray_response(self, resp: SipResponse, source: Addr) -> None:
        pass


class _Pending2xx:
    def __init__(self, endpoint, resp, dest, transport, on_timeout):
        self.endpoint = endpoint
        self.resp = resp
        self.dest = dest
        self.transport = transport
        self.on_timeout = on_timeout
        self.handle = None
        self.deadline = endpoint.clock.time() + endpoint.timers.tx_lifetime
        self.gaps = endpoint.timers.intervals()

    def arm(self):
        clock = self.endpoint.clock
        gap = next(self.gaps)
        if clock.time() + gap >= self.deadline:
            self.handle = clock.call_later(max(0.0, self.deadline - clock.time()), self.expire)
        else:
            self.handle = clock.call_later(gap, self.fire)

    def fire(self):
        self.endpoint.send_message(self.resp, self.dest, self.transport)
        self.arm()

    def expire(self):
        self.endpoint._pending_2xx.pop((self.resp.call_id, self.resp.cseq[0]), None)
        if self.on_timeout:
            self.on_timeout()

    def stop(self):
        if self.handle is not None:
            self.handle.cancel()


class SipEndpoint:
    def __init__(
        self,
        host: str,
        port: int = 5060,
        *,
        clock=None,
        timers: TimerConfig | None = None,
        name: str = "",
        user_agent: str = "ipts",
        rport: bool = False,
    ):
        self.host = host
        self.port = port
        self.clock = clock or AsyncioClock()
        self.timers = timers or TimerConfig()
        self.name = name or f"{host}:{port}"
        self.user_agent = user_agent
        self.rport = rport
        self.tu: TransactionUser = TransactionUser()
        self.server_txs: dict[TransactionKey, ServerTransaction] = {}
        self.client_txs: dict[TransactionKey, ClientTransaction] = {}
        self._pending_2xx: dict[tuple[str, int], _Pending2xx] = {}
        self.udp: UdpSocket | None = None
        self.tcp: TcpTransport | None = None
        self._send_override: Callable[[bytes, Addr, str], None] | None = None
        self.trace: Callable[[str, SipMessage, Addr], None] | None = None
        self.running = False

    # lifecycle -------------------------------------------------------------

    async def start(self, hook=None, tcp: bool = False) -> None:
        self.udp = await UdpSocket.open((self.host, self.port), self._on_udp, hook)
        self.port = self.udp.local_addr[1]
        if tcp:
            self.tcp = TcpTransport(lambda data, addr: self.receive(data, addr, "TCP"))
            await self.tcp.listen((self.host, self.port))
        self.running = True

    def attach(self, send: Callable[[bytes, Addr, str], None]) -> None:
        """Use a custom send function instead of sockets (unit tests)."""
        self._send_override = send
        self.running = True

    def close(self) -> None:
        self.running = False
        for tx in list(self.server_txs.values()) + list(self.client_txs.values()):
            tx._cancel_all()
            tx._lifetime.cancel()
        for p in self._pending_2xx.values():
            p.stop()
        self.server_txs.clear()
        self.client_txs.clear()
        self._pending_2xx.clear()
        if self.udp:
            self.udp.close()
        if self.tcp:
            self.tcp.close()

    @property
    def addr(self) -> Addr:
        return (self.host, self.port)

    @property
    def table_size(self) -> int:
        return len(self.server_txs) + len(self.client_txs)

    # sending ---------------------------------------------------------------

    def send_message(self, msg: SipMessage, addr: Addr, transport: str = "UDP") -> None:
        if not self.running:
            return
        data = serialize_message(msg)
        if self.trace:
            self.trace("send", msg, addr)
        if self._send_override is not None:
            self._send_override(data, addr, transport)
        elif transport == "TCP" and self.tcp is not None:
            self.tcp.send(data, addr)
        elif self.udp is not None:
            self.udp.send(data, addr)

    def stateless_forward(self, msg: SipMessage, next_hop: Addr, transport: str = "UDP") -> None:
        """Send without creating or touching any transaction state."""
        self.send_message(msg, next_hop, transport)

    def via(self, transport: str = "UDP", branch: str | None = None) -> str:
        via = f"SIP/2.0/{transport} {self.host}:{self.port};branch={branch or new_branch()}"
        return via + ";rport" if self.rport else via

    # transactions ----------------------------------------------------------

    def create_server_tx(self, req: SipRequest, source: Addr, transport: str = "UDP"
                         ) -> ServerTransaction:
        if req.method == SipMethod.ACK:
            raise ValueError("ACK never creates a transaction")
        key = transaction_key(req)
        if key is None:
            raise ValueError("request has no Via branch")
        if key in self.server_txs:
            raise DuplicateTransaction(key)
        reply_addr = source if transport == "TCP" else req.top_via.response_addr
        tx = ServerTransaction(self, key, req, transport, reply_addr)
        self.server_txs[key] = tx
        return tx

    def create_client_tx(self, req: SipRequest, dest: Addr, on_response: ResponseCallback,
                         transport: str = "UDP") -> ClientTransaction:
        if req.method == SipMethod.ACK:
            raise ValueError("ACK never creates a transaction")
        key = transaction_key(req)
        if key is None:
            raise ValueError("request has no Via branch")
        if req.method == SipMethod.CANCEL:
            key = TransactionKey(key.branch, SipMethod.CANCEL)
        if key in self.client_txs:
            raise DuplicateTransaction(key)
        tx = ClientTransaction(self, key, req, transport, dest, on_response)
        self.client_txs[key] = tx
        tx.start()
        return tx

    def _remove(self, tx: _Transaction) -> None:
        table = self.server_txs if isinstance(tx, ServerTransaction) else self.client_txs
        if table.get(tx.key) is tx:
            del table[tx.key]

    def match_message(self, msg: SipMessage) -> TransactionKey | None:
        """Find the live transaction a message belongs to; None means no match."""
        key = transaction_key(msg)
        if key is None:
            return None
        if isinstance(msg, SipResponse):
            return key if key in self.client_txs else None
        if msg.method == SipMethod.ACK:
            tx = self.server_txs.get(key)
            # ACK for a 2xx is end-to-end and never matches the INVITE transaction
            if tx is not None and tx.last_response is not None and tx.last_response.code >= 300:
                return key
            return None
        if msg.method == SipMethod.CANCEL:
            own = TransactionKey(key.branch, SipMethod.CANCEL)
            if own in self.server_txs:
                return own
            invite = TransactionKey(key.branch, SipMethod.INVITE)
            return invite if invite in self.server_txs else None
        return key if key in self.server_txs else None

    # 2xx reliability for INVITE (dialog layer) -----------------------------

    def send_2xx(self, tx: ServerTransaction, resp: SipResponse,
                 on_ack_timeout: Callable[[], None] | None = None) -> None:
        tx.respond(resp)
        if tx.reliable:
            return
        key = (resp.call_id, resp.cseq[0])
        old = self._pending_2xx.pop(key, None)
        if old:
            old.stop()
        pending = _Pending2xx(self, resp, tx.reply_addr, tx.transport, on_ack_timeout)
        self._pending_2xx[key] = pending
        pending.arm()

    # receiving -------------------------------------------------------------

    def _on_udp(self, data: bytes, addr: Addr) -> None:
        self.receive(data, addr, "UDP")

    def receive(self, data: bytes, source: Addr, transport: str = "UDP") -> None:
        if not self.running:
            return
        if not data.strip():
            return  # keepalive
        try:
            msg = parse_message(data)
            key_probe = msg.top_via
        except (ParseError, MalformedUri, ValueError) as exc:
            log.info("%s: dropping unparsable message from %s: %s", self.name, source, exc)
            return
        if key_probe is None:
            log.info("%s: dropping message without Via from %s", self.name, source)
            return
        if isinstance(msg, SipRequest):
            msg = self._stamp_received(msg, source)
        if self.trace:
            self.trace("recv", msg, source)
        try:
            self._dispatch(msg, source, transport)
        except (ParseError, MalformedUri) as exc:
            log.info("%s: rejecting malformed message: %s", self.name, exc)

    def _stamp_received(self, req: SipRequest, source: Addr) -> SipRequest:
        via = req.top_via
        changed = via
        if via.host != source[0]:
            changed = changed.with_param("received", source[0])
        if via.param("rport") == "":
            changed = changed.with_param("rport", str(source[1]))
        if changed is via:
            return req
        return req.replace_first("Via", str(changed))

    def _dispatch(self, msg: SipMessage, source: Addr, transport: str) -> None:
        key = self.match_message(msg)
        if isinstance(msg, SipResponse):
            if key is not None:
                self.client_txs[key].receive_response(msg)
            else:
                self.tu.on_stray_response(msg, source)
            return
        if key is not None:
            tx = self.server_txs[key]
            if msg.method == SipMethod.CANCEL and tx.key.method == SipMethod.INVITE:
                cancel_tx = self.create_server_tx(msg, source, transport)
                cancel_tx.respond(build_response(msg, 200))
                self.tu.on_cancel(tx, msg)
            else:
                tx.receive_request(msg)
            return
        if msg.method == SipMethod.ACK:
            pending = self._pending_2xx.pop((msg.call_id, msg.cseq[0]), None)
            if pending is not None:
                pending.stop()
            self.tu.on_ack(msg, source)
            return
        self.tu.on_request(msg, source, transport)
