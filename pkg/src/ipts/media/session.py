"""RTP sessions: socket ownership, outbound sequencing, and 20 ms media pacing."""

from __future__ import annotations

import asyncio
import logging
import random
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from ..net import Addr, TransportError, UdpSocket
from .dsp import SILENCE
from .dtmf import EVENT_PT, event_packets
from .g711 import FRAME_SAMPLES, SAMPLE_RATE, decode_pcmu, encode_pcmu
from .rtp import MalformedRtp, RtpPacket
from .wav import WavWriter, read_wav

log = logging.getLogger(__name__)

FRAME_SECONDS = FRAME_SAMPLES / SAMPLE_RATE


class MediaPortExhausted(RuntimeError):
    pass


class SocketClosed(RuntimeError):
    pass


class PortAllocator:
    """Even ports from a range, handed out sequentially with wrap-around."""

    def __init__(self, host: str, low: int = 16384, high: int = 32767, hook=None):
        if low % 2:
            low += 1
        self.host = host
        self.low = low
        self.high = high
        self.hook = hook
        self._next = low

    def _candidates(self):
        count = (self.high - self.low) // 2 + 1
        for _ in range(count):
            port = self._next
            self._next += 2
            if self._next > self.high:
                self._next = self.low
            yield port

    async def open(self, on_datagram=None) -> UdpSocket:
        for port in self._candidates():
            try:
                return await UdpSocket.open((self.host, port), on_datagram, self.hook)
            except TransportError:
                continue
        raise MediaPortExhausted(f"no free even port in {self.low}-{self.high} on {self.host}")


class FrameSource(Protocol):
    def next_frame(self) -> np.ndarray | None: ...


class FileSource:
    """Frames from a WAV sample array; loops for music-on-hold."""

    def __init__(self, samples: np.ndarray, loop: bool = False):
        self.samples = np.asarray(samples, dtype=np.int16)
        self.loop = loop
        self._pos = 0

    @classmethod
    def from_wav(cls, path: str | Path, loop: bool = False) -> FileSource:
        return cls(read_wav(path), loop)

    @property
    def finished(self) -> bool:
        return not self.loop and self._pos >= len(self.samples)

    def next_frame(self) -> np.ndarray | None:
        if len(self.samples) == 0 or self.finished:
            return None
        out = np.zeros(FRAME_SAMPLES, dtype=np.int16)
        filled = 0
        while filled < FRAME_SAMPLES:
            if self._pos >= len(self.samples):
                if not self.loop:
                    break
                self._pos = 0
            take = min(FRAME_SAMPLES - filled, len(self.samples) - self._pos)
            out[filled:filled + take] = self.samples[self._pos:self._pos + take]
            filled += take
            self._pos += take
        return out


class SilenceSource:
    def next_frame(self) -> np.ndarray:
        return SILENCE


class Ticker:
    """Calls ``callback`` every 20 ms on an absolute schedule (no drift)."""

    def __init__(self, callback: Callable[[], None], period: float = FRAME_SECONDS):
        self.callback = callback
        self.period = period
        self._task: asyncio.Task | None = None

    def start(self) -> None:
        if self._task is None:
            self._task = asyncio.get_running_loop().create_task(self._run())

    async def _run(self) -> None:
        loop = asyncio.get_running_loop()
        due = loop.time()
        while True:
            try:
                self.callback()
            except Exception:  # a bad frame must not kill the pacing loop
                log.exception("media tick failed")
            due += self.period
            delay = due - loop.time()
            if delay < -0.2:
                due = loop.time()
                delay = 0
            await asyncio.sleep(max(0.0, delay))

    def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            self._task = None

    @property
    def running(self) -> bool:
        return self._task is not None


PacketListener = Callable[[RtpPacket, Addr], None]


class RtpSession:
    """One RTP endpoint.

    Outbound packets always carry this session's ssrc, a sequence number that
    increases by exactly one per packet, and a timestamp that advances 160 per
    audio frame. Inbound packets are fanned out to listeners.
    """

    def __init__(self, sock: UdpSocket, remote: Addr | None = None, *, latch: bool = False):
        self.sock = sock
        sock.on_datagram = self._on_datagram
        self.remote_addr = remote
        self.latch = latch
        self._latched = False
        self.ssrc = random.getrandbits(32)
        self.seq = random.getrandbits(16)
        self.timestamp = random.getrandbits(32)
        self.listeners: list[PacketListener] = []
        self.mode = "idle"
        self.sent = 0
        self.received = 0
        self.last_source: Addr | None = None
        self._ticker: Ticker | None = None
        self._source: FrameSource | None = None
        self._recorder: WavWriter | None = None
        self._relay_peer: RtpSession | None = None
        self._ts_offset: int | None = None
        self.on_source_end: Callable[[], None] | None = None
        self.closed = False

    @classmethod
    async def open(cls, allocator: PortAllocator, remote: Addr | None = None, **kw
                   ) -> RtpSession:
        sock = await allocator.open()
        return cls(sock, remote, **kw)

    @property
    def local_addr(self) -> Addr:
        return self.sock.local_addr

    # outbound ----------------------------------------------------------------

    def _emit(self, pkt: RtpPacket) -> None:
        if self.closed:
            raise SocketClosed("session closed")
        if self.remote_addr is None:
            return
        self.sock.send(pkt.pack(), self.remote_addr)
        self.sent += 1

    def send_payload(self, payload: bytes, payload_type: int = 0, *, marker: bool = False,
                     timestamp: int | None = None) -> None:
        ts = self.timestamp if timestamp is None else timestamp
        self._emit(RtpPacket(payload_type, self.seq, ts, self.ssrc, payload, marker))
        self.seq = (self.seq + 1) & 0xFFFF

    def send_frame(self, samples) -> None:
        self.send_payload(encode_pcmu(samples))
        self.timestamp = (self.timestamp + FRAME_SAMPLES) & 0xFFFFFFFF

    def send_dtmf(self, digit: str) -> None:
        for pkt in event_packets(digit, ssrc=self.ssrc, seq=self.seq, timestamp=self.timestamp):
            self._emit(pkt)
            self.seq = (self.seq + 1) & 0xFFFF
        self.timestamp = (self.timestamp + 5 * FRAME_SAMPLES) & 0xFFFFFFFF

    def relay(self, pkt: RtpPacket) -> None:
        """Forward another stream's payload unmodified under this session's identity."""
        if self._ts_offset is None:
            self._ts_offset = (self.timestamp - pkt.timestamp) & 0xFFFFFFFF
        ts = (pkt.timestamp + self._ts_offset) & 0xFFFFFFFF
        self.send_payload(pkt.payload, pkt.payload_type, marker=pkt.marker, timestamp=ts)
        self.timestamp = (ts + (FRAME_SAMPLES if pkt.payload_type == 0 else 0)) & 0xFFFFFFFF

    def play(self, source: FrameSource, mode: str = "stream") -> None:
        """Start pacing frames from ``source`` (replaces any current source)."""
        self._source = source
        self.mode = mode
        if self._ticker is None:
            self._ticker = Ticker(self._tick)
        self._ticker.start()

    def stream_file(self, path: str | Path, loop: bool = True) -> FileSource:
        source = FileSource.from_wav(path, loop)
        self.play(source, "stream")
        return source

    def stop_playing(self) -> None:
        self._source = None
        if self._ticker is not None:
            self._ticker.stop()
        if self.mode in ("stream", "tone", "mixer"):
            self.mode = "idle"

    def _tick(self) -> None:
        if self._source is None or self.closed:
            return
        frame = self._source.next_frame()
        if frame is None:
            self.stop_playing()
            if self.on_source_end:
                self.on_source_end()
            return
        self.send_frame(frame)

    # inbound -----------------------------------------------------------------

    def _on_datagram(self, data: bytes, addr: Addr) -> None:
        try:
            pkt = RtpPacket.unpack(data)
        except MalformedRtp:
            return
        self.received += 1
        self.last_source = addr
        if self.latch and not self._latched:
            self.remote_addr = addr
            self._latched = True
        if self._recorder is not None and pkt.payload_type == 0 and len(pkt.payload) == FRAME_SAMPLES:
            self._recorder.write(decode_pcmu(pkt.payload))
        if self._relay_peer is not None:
            self._relay_peer.relay(pkt)
        for listener in list(self.listeners):
            listener(pkt, addr)

    def relay_to(self, peer: RtpSession | None) -> None:
        """Forward every inbound packet to ``peer`` (None stops relaying)."""
        self._relay_peer = peer
        if peer is not None:
            peer._ts_offset = None

    def record(self, path: str | Path) -> WavWriter:
        self._recorder = WavWriter(path)
        return self._recorder

    def stop_recording(self) -> WavWriter | None:
        rec, self._recorder = self._recorder, None
        if rec is not None:
            rec.close()
        return rec

    def close(self) -> None:
        if self.closed:
            return
        self.stop_playing()
        self.stop_recording()
        self._relay_peer = None
        self.closed = True
        self.sock.close()


def dtmf_listener(callback: Callable[[str], None]) -> PacketListener:
    from .dtmf import DtmfDetector

    detector = DtmfDetector(EVENT_PT)

    def listen(pkt: RtpPacket, addr: Addr) -> None:
        event = detector.feed(pkt)
        if event is not None:
            callback(event.digit)

    return listen
