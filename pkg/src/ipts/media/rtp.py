"""RTP fixed header (RFC 3550 layout, no CSRC list, no extension)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

HEADER = struct.Struct("!BBHII")
HEADER_SIZE = HEADER.size  # 12


class MalformedRtp(ValueError):
    pass


@dataclass(frozen=True)
class RtpPacket:
    payload_type: int
    seq: int
    timestamp: int
    ssrc: int
    payload: bytes = b""
    marker: bool = False
    version: int = 2

    def pack(self) -> bytes:
        b0 = self.version << 6
        b1 = (0x80 if self.marker else 0) | (self.payload_type & 0x7F)
        return HEADER.pack(
            b0, b1, self.seq & 0xFFFF, self.timestamp & 0xFFFFFFFF, self.ssrc & 0xFFFFFFFF
        ) + self.payload

    @classmethod
    def unpack(cls, data: bytes) -> RtpPacket:
        if len(data) < HEADER_SIZE:
            raise MalformedRtp("short packet")
        b0, b1, seq, ts, ssrc = HEADER.unpack_from(data)
        version = b0 >> 6
        if version != 2:
            raise MalformedRtp(f"version {version}")
        offset = HEADER_SIZE + 4 * (b0 & 0x0F)
        if b0 & 0x10:
            if len(data) < offset + 4:
                raise MalformedRtp("truncated extension")
            (ext_words,) = struct.unpack_from("!H", data, offset + 2)
            offset += 4 + 4 * ext_words
        payload = data[offset:]
        if b0 & 0x20 and payload:
            payload = payload[: len(payload) - payload[-1]]
        return cls(
            payload_type=b1 & 0x7F,
            seq=seq,
            timestamp=ts,
            ssrc=ssrc,
            payload=payload,
            marker=bool(b1 & 0x80),
            version=version,
        )


def is_rtp(data: bytes) -> bool:
    """Cheap heuristic used by captures: version 2 and a plausible header."""
    return len(data) >= HEADER_SIZE and data[0] >> 6 == 2 and not data.startswith(b"SIP/")
