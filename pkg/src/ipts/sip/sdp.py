"""Single-audio-stream SDP subset (v/o/s/c/t/m/a lines)."""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, replace


class MalformedSdp(ValueError):
    pass


class Direction(str, enum.Enum):
    SENDRECV = "sendrecv"
    SENDONLY = "sendonly"
    RECVONLY = "recvonly"
    INACTIVE = "inactive"


PCMU = 0
TELEPHONE_EVENT = 101


@dataclass(frozen=True)
class SdpBody:
    connection_address: str
    media_port: int
    payload_types: tuple[int, ...] = (PCMU, TELEPHONE_EVENT)
    direction: Direction = Direction.SENDRECV
    session_name: str = "ipts"
    origin_user: str = "-"
    session_id: int = 0
    session_version: int = 0
    origin_address: str | None = None
    # a= lines other than the direction, kept verbatim and in order
    attributes: tuple[str, ...] = ()
    # any other line types, kept verbatim
    extra_lines: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.direction, Direction):
            object.__setattr__(self, "direction", Direction(self.direction))
        try:
            ipaddress.IPv4Address(self.connection_address)
        except ValueError as exc:
            raise MalformedSdp(f"bad connection address {self.connection_address!r}") from exc
        if not self.payload_types:
            raise MalformedSdp("no payload types")
        if self.direction != Direction.INACTIVE and (
            self.media_port <= 0 or self.media_port % 2
        ):
            raise MalformedSdp(f"media port {self.media_port} must be even and positive")

    @property
    def media_addr(self) -> tuple[str, int]:
        return (self.connection_address, self.media_port)

    @property
    def is_hold(self) -> bool:
        return (
            self.direction in (Direction.SENDONLY, Direction.INACTIVE)
            or self.connection_address == "0.0.0.0"
        )

    def with_direction(self, direction: Direction) -> SdpBody:
        return replace(self, direction=direction)

    def bumped(self) -> SdpBody:
        return replace(self, session_version=self.session_version + 1)


def parse_sdp(data: bytes) -> SdpBody:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedSdp("not UTF-8") from exc
    lines = [ln for ln in text.replace("\r\n", "\n").split("\n") if ln]
    if not lines or lines[0] != "v=0":
        raise MalformedSdp("SDP must start with v=0")

    values: dict = {"attributes": [], "extra_lines": []}
    session_conn = media_conn = None
    seen_media = False
    for line in lines[1:]:
        kind, eq, value = line.partition("=")
        if not eq or len(kind) != 1:
            raise MalformedSdp(f"bad line {line!r}")
        if kind == "o":
            parts = value.split()
            if len(parts) != 6 or not parts[1].isdigit() or not parts[2].isdigit():
                raise MalformedSdp(f"bad origin {line!r}")
            values["origin_user"] = parts[0]
            values["session_id"] = int(parts[1])
            values["session_version"] = int(parts[2])
            values["origin_address"] = parts[5]
        elif kind == "s":
            values["session_name"] = value
        elif kind == "c":
            parts = value.split()
            if len(parts) != 3 or parts[:2] != ["IN", "IP4"]:
                raise MalformedSdp(f"bad connection {line!r}")
            addr = parts[2].split("/")[0]
            if seen_media:
                media_conn = addr
            else:
                session_conn = addr
        elif kind == "t":
            if value != "0 0":
                values["extra_lines"].append(line)
        elif kind == "m":
            if seen_media:
                raise MalformedSdp("only one m= line is supported")
            seen_media = True
            parts = value.split()
            if len(parts) < 4 or parts[0] != "audio" or not parts[1].isdigit():
                raise MalformedSdp(f"bad media line {line!r}")
            values["media_port"] = int(parts[1])
            try:
                values["payload_types"] = tuple(int(p) for p in parts[3:])
            except ValueError as exc:
                raise MalformedSdp(f"bad payload list {line!r}") from exc
        elif kind == "a":
            if value in {d.value for d in Direction}:
                values["direction"] = Direction(value)
            else:
                values["attributes"].append(value)
        else:
            values["extra_lines"].append(line)

    conn = media_conn or session_conn
    if conn is None:
        raise MalformedSdp("no c= line")
    if "media_port" not in values:
        raise MalformedSdp("no m= line")
    values["attributes"] = tuple(values["attributes"])
    values["extra_lines"] = tuple(values["extra_lines"])
    return SdpBody(connection_address=conn, **values)


def serialize_sdp(sdp: SdpBody) -> bytes:
    origin = sdp.origin_address or sdp.connection_address
    lines = [
        "v=0",
        f"o={sdp.origin_user} {sdp.session_id} {sdp.session_version} IN IP4 {origin}",
        f"s={sdp.session_name}",
        f"c=IN IP4 {sdp.connection_address}",
        "t=0 0",
    ]
    lines.extend(sdp.extra_lines)
    pts = " ".join(str(p) for p in sdp.payload_types)
    lines.append(f"m=audio {sdp.media_port} RTP/AVP {pts}")
    lines.extend(f"a={a}" for a in sdp.attributes)
    lines.append(f"a={sdp.direction.value}")
    return ("\r\n".join(lines) + "\r\n").encode("utf-8")


def audio_offer(
    address: str,
    port: int,
    *,
    direction: Direction = Direction.SENDRECV,
    session_id: int = 0,
    version: int = 0,
) -> SdpBody:
    """Standard PCMU + telephone-event offer used by every endpoint here."""
    return SdpBody(
        connection_address=address,
        media_port=port,
        payload_types=(PCMU, TELEPHONE_EVENT),
        direction=direction,
        session_id=session_id,
        session_version=version,
        attributes=(
            "rtpmap:0 PCMU/8000",
            "rtpmap:101 telephone-event/8000",
            "fmtp:101 0-15",
            "ptime:20",
        ),
    )
