"""SIP message model: parsing, serialization and response construction."""

from __future__ import annotations

import enum
import re
import secrets
from dataclasses import dataclass, replace
from typing import Union

from .uri import (
    BRANCH_MAGIC,
    MalformedUri,
    NameAddr,
    SipUri,
    Via,
    parse_name_addr,
    parse_uri,
    parse_via,
)

MAX_MESSAGE_BYTES = 16 * 1024
MANDATORY_HEADERS = ("Via", "From", "To", "Call-ID", "CSeq", "Max-Forwards")

_TOKEN_RE = re.compile(r"^[A-Za-z0-9.!%*_+`'~\-]+$")

COMPACT_HEADERS = {
    "v": "Via",
    "f": "From",
    "t": "To",
    "i": "Call-ID",
    "m": "Contact",
    "l": "Content-Length",
    "c": "Content-Type",
}


class ParseError(ValueError):
    pass


class MalformedStartLine(ParseError):
    pass


class MissingMandatoryHeader(ParseError):
    def __init__(self, name: str):
        super().__init__(f"missing mandatory header {name}")
        self.header = name


class BodyLengthMismatch(ParseError):
    pass


class StatusOutOfRange(ValueError):
    pass


class SipMethod(str, enum.Enum):
    INVITE = "INVITE"
    ACK = "ACK"
    OPTIONS = "OPTIONS"
    BYE = "BYE"
    CANCEL = "CANCEL"
    REGISTER = "REGISTER"

    @classmethod
    def _missing_(cls, value):
        # unknown tokens become extension pseudo-members, e.g. SipMethod("INFO")
        if isinstance(value, str) and _TOKEN_RE.match(value):
            member = str.__new__(cls, value)
            member._name_ = value
            member._value_ = value
            return member
        return None

    @property
    def is_extension(self) -> bool:
        return self._name_ not in type(self).__members__

    def __str__(self) -> str:
        return self.value


class StatusClass(enum.IntEnum):
    PROVISIONAL = 1
    SUCCESS = 2
    REDIRECTION = 3
    CLIENT_ERROR = 4
    SERVER_ERROR = 5
    GLOBAL_FAILURE = 6


def classify_status(code: int) -> StatusClass:
    if not 100 <= code <= 699:
        raise StatusOutOfRange(f"status code {code} outside 100..699")
    return StatusClass(code // 100)


REASONS = {
    100: "Trying",
    180: "Ringing",
    181: "Call Is Being Forwarded",
    183: "Session Progress",
    200: "OK",
    202: "Accepted",
    301: "Moved Permanently",
    302: "Moved Temporarily",
    400: "Bad Request",
    401: "Unauthorized",
    403: "Forbidden",
    404: "Not Found",
    405: "Method Not Allowed",
    407: "Proxy Authentication Required",
    408: "Request Timeout",
    413: "Request Entity Too Large",
    423: "Interval Too Brief",
    480: "Temporarily Unavailable",
    481: "Call/Transaction Does Not Exist",
    483: "Too Many Hops",
    486: "Busy Here",
    487: "Request Terminated",
    488: "Not Acceptable Here",
    500: "Server Internal Error",
    501: "Not Implemented",
    503: "Service Unavailable",
    600: "Busy Everywhere",
    603: "Decline",
    604: "Does Not Exist Anywhere",
}


@dataclass(frozen=True)
class StatusCode:
    code: int
    reason: str = ""

    def __post_init__(self):
        classify_status(self.code)
        if not self.reason:
            object.__setattr__(self, "reason", REASONS.get(self.code, "Unknown"))

    @property
    def status_class(self) -> StatusClass:
        return classify_status(self.code)

    @property
    def is_final(self) -> bool:
        return self.code >= 200


@dataclass(frozen=True)
class HeaderField:
    name: str
    value: str

    def is_named(self, name: str) -> bool:
        return self.name.lower() == name.lower()


Headers = tuple[HeaderField, ...]


class _MessageBase:
    headers: Headers
    body: bytes

    def header(self, name: str) -> str | None:
        for h in self.headers:
            if h.is_named(name):
                return h.value
        return None

    def header_values(self, name: str) -> list[str]:
        return [h.value for h in self.headers if h.is_named(name)]

    def has_header(self, name: str) -> bool:
        return any(h.is_named(name) for h in self.headers)

    def with_header(self, name: str, value: str):
        """Replace the first header of that name in place, or append it."""
        out, done = [], False
        for h in self.headers:
            if h.is_named(name):
                if not done:
                    out.append(HeaderField(h.name, value))
                    done = True
                continue
            out.append(h)
        if not done:
            out.append(HeaderField(name, value))
        return replace(self, headers=tuple(out))

    def without_header(self, name: str):
        return replace(self, headers=tuple(h for h in self.headers if not h.is_named(name)))

    def prepend_header(self, name: str, value: str):
        """Insert before the first existing header of that name (or at the front)."""
        out = list(self.headers)
        for i, h in enumerate(out):
            if h.is_named(name):
                out.insert(i, HeaderField(name, value))
                break
        else:
            out.insert(0, HeaderField(name, value))
        return replace(self, headers=tuple(out))

    def replace_first(self, name: str, value: str):
        out = list(self.headers)
        for i, h in enumerate(out):
            if h.is_named(name):
                out[i] = HeaderField(h.name, value)
                break
        else:
            raise KeyError(name)
        return replace(self, headers=tuple(out))

    def drop_first(self, name: str):
        out = list(self.headers)
        for i, h in enumerate(out):
            if h.is_named(name):
                del out[i]
                break
        return replace(self, headers=tuple(out))

    def with_body(self, body: bytes, content_type: str | None = "application/sdp"):
        msg = replace(self, body=body)
        if body and content_type:
            return msg.with_header("Content-Type", content_type)
        if not body:
            return msg.without_header("Content-Type")
        return msg

    # structured accessors

    @property
    def vias(self) -> list[Via]:
        return [parse_via(v) for v in self.header_values("Via")]

    @property
    def top_via(self) -> Via | None:
        v = self.header("Via")
        return parse_via(v) if v is not None else None

    @property
    def branch(self) -> str | None:
        via = self.top_via
        return via.branch if via else None

    @property
    def call_id(self) -> str | None:
        return self.header("Call-ID")

    @property
    def cseq(self) -> tuple[int, SipMethod]:
        value = self.header("CSeq")
        if value is None:
            raise MissingMandatoryHeader("CSeq")
        num, _, method = value.strip().partition(" ")
        try:
            return int(num), SipMethod(method.strip())
        except ValueError as exc:
            raise ParseError(f"bad CSeq {value!r}") from exc

    @property
    def from_addr(self) -> NameAddr:
        return parse_name_addr(self.header("From") or "")

    @property
    def to_addr(self) -> NameAddr:
        return parse_name_addr(self.header("To") or "")

    @property
    def contact(self) -> NameAddr | None:
        v = self.header("Contact")
        if v is None or v.strip() == "*":
            return None
        return parse_name_addr(v)

    @property
    def from_tag(self) -> str | None:
        return self.from_addr.tag

    @property
    def to_tag(self) -> str | None:
        return self.to_addr.tag


@dataclass(frozen=True)
class SipRequest(_MessageBase):
    method: SipMethod
    uri: SipUri
    headers: Headers = ()
    body: bytes = b""

    def __post_init__(self):
        if not isinstance(self.method, SipMethod):
            object.__setattr__(self, "method", SipMethod(self.method))

    @property
    def max_forwards(self) -> int | None:
        v = self.header("Max-Forwards")
        return int(v) if v is not None and v.strip().lstrip("-").isdigit() else None

    def start_line(self) -> str:
        return f"{self.method.value} {self.uri} SIP/2.0"


@dataclass(frozen=True)
class SipResponse(_MessageBase):
    status: StatusCode
    headers: Headers = ()
    body: bytes = b""

    @property
    def code(self) -> int:
        return self.status.code

    def start_line(self) -> str:
        return f"SIP/2.0 {self.status.code} {self.status.reason}"


SipMessage = Union[SipRequest, SipResponse]


def _split_via_values(value: str) -> list[str]:
    # Via is the only header allowed to arrive comma-combined
    return [v.strip() for v in value.split(",") if v.strip()]


def parse_message(raw: bytes, *, strict: bool = False) -> SipMessage:
    """Parse one complete datagram/frame into a request or response.

    With ``strict`` the six mandatory headers must be present.
    """
    head, sep, rest = raw.partition(b"\r\n\r\n")
    if not sep:
        # tolerate a missing final CRLF on header-only messages
        head, rest = raw.rstrip(b"\r\n"), b""
    try:
        text = head.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("headers are not valid UTF-8") from exc
    lines = text.split("\r\n")
    start = lines[0]

    headers: list[HeaderField] = []
    content_length = None
    for line in lines[1:]:
        if not line:
            continue
        name, colon, value = line.partition(":")
        name = name.strip()
        if not colon or not name:
            raise ParseError(f"bad header line {line!r}")
        name = COMPACT_HEADERS.get(name, name)
        value = value.strip()
        if name.lower() == "content-length":
            if not value.isdigit():
                raise ParseError(f"bad Content-Length {value!r}")
            content_length = int(value)
            continue
        if name.lower() == "via":
            headers.extend(HeaderField(name, v) for v in _split_via_values(value))
        else:
            headers.append(HeaderField(name, value))

    if content_length is None:
        body = rest
    elif content_length > len(rest):
        raise BodyLengthMismatch(
            f"Content-Length {content_length} but only {len(rest)} body bytes"
        )
    else:
        body = rest[:content_length]

    msg = _parse_start_line(start, tuple(headers), body)
    if strict:
        validate(msg)
    return msg


def _parse_start_line(start: str, headers: Headers, body: bytes) -> SipMessage:
    parts = start.split(" ", 2)
    if start.startswith("SIP/"):
        if len(parts) < 2 or parts[0] != "SIP/2.0" or not parts[1].isdigit():
            raise MalformedStartLine(start)
        try:
            status = StatusCode(int(parts[1]), parts[2] if len(parts) > 2 else "")
        except StatusOutOfRange as exc:
            raise MalformedStartLine(start) from exc
        return SipResponse(status, headers, body)
    if len(parts) != 3 or parts[2] != "SIP/2.0":
        raise MalformedStartLine(start)
    try:
        method = SipMethod(parts[0])
    except ValueError as exc:
        raise MalformedStartLine(start) from exc
    try:
        uri = parse_uri(parts[1])
    except MalformedUri as exc:
        raise MalformedStartLine(start) from exc
    return SipRequest(method, uri, headers, body)


def validate(msg: SipMessage) -> None:
    """Raise MissingMandatoryHeader unless the routing-critical headers exist."""
    required = MANDATORY_HEADERS if isinstance(msg, SipRequest) else MANDATORY_HEADERS[:-1]
    for name in required:
        if not msg.has_header(name):
            raise MissingMandatoryHeader(name)
    if isinstance(msg, SipRequest):
        _, method = msg.cseq
        if method != msg.method:
            raise ParseError("CSeq method does not match request method")


def serialize_message(msg: SipMessage) -> bytes:
    lines = [msg.start_line()]
    lines.extend(f"{h.name}: {h.value}" for h in msg.headers)
    lines.append(f"Content-Length: {len(msg.body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode("utf-8") + msg.body


def new_tag() -> str:
    return secrets.token_hex(4)


def new_branch() -> str:
    return f"{BRANCH_MAGIC}-{secrets.token_hex(6)}"


def new_call_id(host: str) -> str:
    return f"{secrets.token_hex(8)}@{host}"


def build_response(
    req: SipRequest,
    code: int | StatusCode,
    reason: str = "",
    *,
    to_tag: str | None = None,
    headers: tuple[tuple[str, str], ...] = (),
    body: bytes = b"",
    content_type: str = "application/sdp",
) -> SipResponse:
    """Answer ``req``: Via stack, From, To, Call-ID and CSeq are copied verbatim.

    Final responses get a To tag when the request had none.
    """
    status = code if isinstance(code, StatusCode) else StatusCode(code, reason)
    out: list[HeaderField] = [HeaderField("Via", v) for v in req.header_values("Via")]
    for name in ("From", "To", "Call-ID", "CSeq"):
        value = req.header(name)
        if value is None:
            raise MissingMandatoryHeader(name)
        if name == "To" and status.code != 100:
            to = parse_name_addr(value)
            if to.tag is None and (status.is_final or to_tag is not None):
                value = str(to.with_tag(to_tag or new_tag()))
        out.append(HeaderField(name, value))
    if not out or not out[0].is_named("Via"):
        raise MissingMandatoryHeader("Via")
    out.extend(HeaderField(n, v) for n, v in headers)
    if body:
        out.append(HeaderField("Content-Type", content_type))
    return SipResponse(status, tuple(out), body)
