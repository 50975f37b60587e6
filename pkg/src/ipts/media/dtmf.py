"""Telephone-event (RFC 2833 style) DTMF payloads."""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .rtp import RtpPacket

EVENT_PT = 101
DIGITS = "0123456789*#"


@dataclass(frozen=True)
class DtmfEvent:
    digit: str
    duration_ms: int


def event_payload(digit: str, *, end: bool, duration_samples: int, volume: int = 10) -> bytes:
    code = DIGITS.index(digit)
    return struct.pack("!BBH", code, (0x80 if end else 0) | (volume & 0x3F), duration_samples)


def event_packets(digit: str, *, ssrc: int, seq: int, timestamp: int,
                  packets: int = 5, end_repeats: int = 3) -> list[RtpPacket]:
    """One key press: ``packets`` growing-duration updates, end packet sent 3 times."""
    out = []
    for i in range(packets):
        last = i == packets - 1
        dur = 160 * (i + 1)
        repeats = end_repeats if last else 1
        for _ in range(repeats):
            out.append(RtpPacket(
                EVENT_PT, seq, timestamp, ssrc,
                event_payload(digit, end=last, duration_samples=dur),
                marker=i == 0,
            ))
            seq += 1
    return out


def detect_dtmf(packets, payload_type: int = EVENT_PT) -> list[DtmfEvent]:
    """One event per end-marked run; repeated end packets and audio are ignored."""
    detector = DtmfDetector(payload_type)
    return [e for e in map(detector.feed, packets) if e is not None]


class DtmfDetector:
    """Streaming form of :func:`detect_dtmf`."""

    def __init__(self, payload_type: int = EVENT_PT):
        self.payload_type = payload_type
        self._finished: set[tuple[int, int]] = set()

    def feed(self, pkt: RtpPacket) -> DtmfEvent | None:
        if pkt.payload_type != self.payload_type or len(pkt.payload) < 4:
            return None
        code, flags, duration = struct.unpack_from("!BBH", pkt.payload)
        if code >= len(DIGITS) or not flags & 0x80:
            return None
        run = (pkt.ssrc, pkt.timestamp)
        if run in self._finished:
            return None
        self._finished.add(run)
        return DtmfEvent(DIGITS[code], duration * 1000 // 8000)
