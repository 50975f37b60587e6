"""SIP URIs, name-addr values (From/To/Contact/Route) and Via entries."""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

DEFAULT_PORT = 5060

Params = tuple[tuple[str, "str | None"], ...]


class MalformedUri(ValueError):
    pass


def _parse_params(text: str) -> Params:
    params = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        name, sep, value = item.partition("=")
        params.append((name.strip(), value.strip() if sep else None))
    return tuple(params)


def _format_params(params: Params) -> str:
    return "".join(f";{k}" if v is None else f";{k}={v}" for k, v in params)


def _get_param(params: Params, name: str) -> str | None:
    lname = name.lower()
    for k, v in params:
        if k.lower() == lname:
            return v if v is not None else ""
    return None


def _set_param(params: Params, name: str, value: str | None) -> Params:
    lname = name.lower()
    out = [(k, v) for k, v in params if k.lower() != lname]
    out.append((name, value))
    return tuple(out)


def _del_param(params: Params, name: str) -> Params:
    lname = name.lower()
    return tuple((k, v) for k, v in params if k.lower() != lname)


_HOST_RE = re.compile(r"^[A-Za-z0-9.\-_]+$")


def _split_hostport(text: str) -> tuple[str, int | None]:
    host, sep, port = text.partition(":")
    if not host or not _HOST_RE.match(host):
        raise MalformedUri(f"bad host in {text!r}")
    if not sep:
        return host, None
    if not port.isdigit() or not 0 < int(port) < 65536:
        raise MalformedUri(f"bad port in {text!r}")
    return host, int(port)


@dataclass(frozen=True)
class SipUri:
    host: str
    user: str | None = None
    port: int = DEFAULT_PORT
    params: Params = ()
    scheme: str = "sip"
    # only controls whether the port is written back out
    explicit_port: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        if not self.host:
            raise MalformedUri("host is empty")

    def __str__(self) -> str:
        out = f"{self.scheme}:"
        if self.user is not None:
            out += f"{self.user}@"
        out += self.host
        if self.explicit_port or self.port != DEFAULT_PORT:
            out += f":{self.port}"
        return out + _format_params(self.params)

    @property
    def addr(self) -> tuple[str, int]:
        return (self.host, self.port)

    def param(self, name: str) -> str | None:
        return _get_param(self.params, name)

    def with_param(self, name: str, value: str | None = None) -> SipUri:
        return replace(self, params=_set_param(self.params, name, value))

    def without_params(self) -> SipUri:
        return replace(self, params=())

    def aor(self) -> str:
        """Address-of-record key: scheme, user and lowercased host only."""
        user = f"{self.user}@" if self.user is not None else ""
        return f"{self.scheme}:{user}{self.host.lower()}"


def parse_uri(text: str) -> SipUri:
    text = text.strip()
    scheme, sep, rest = text.partition(":")
    if not sep or scheme != "sip":
        raise MalformedUri(f"unsupported or missing scheme in {text!r}")
    if "?" in rest:
        raise MalformedUri("URI headers are not supported")
    hostpart, _, paramtext = rest.partition(";")
    user = None
    if "@" in hostpart:
        user, _, hostpart = hostpart.rpartition("@")
        if not user:
            raise MalformedUri(f"empty user in {text!r}")
    host, port = _split_hostport(hostpart)
    return SipUri(
        host=host,
        user=user,
        port=port if port is not None else DEFAULT_PORT,
        params=_parse_params(paramtext),
        explicit_port=port is not None,
    )


@dataclass(frozen=True)
class NameAddr:
    """A From/To/Contact/Route style value: optional display name, URI, header params."""

    uri: SipUri
    display: str | None = None
    params: Params = ()

    def __str__(self) -> str:
        name = f'"{self.display}" ' if self.display is not None else ""
        return f"{name}<{self.uri}>{_format_params(self.params)}"

    @property
    def tag(self) -> str | None:
        return _get_param(self.params, "tag")

    def param(self, name: str) -> str | None:
        return _get_param(self.params, name)

    def with_tag(self, tag: str) -> NameAddr:
        return replace(self, params=_set_param(self.params, "tag", tag))

    def with_param(self, name: str, value: str | None = None) -> NameAddr:
        return replace(self, params=_set_param(self.params, name, value))


def parse_name_addr(text: str) -> NameAddr:
    text = text.strip()
    display = None
    if text.startswith('"'):
        end = text.find('"', 1)
        if end < 0:
            raise MalformedUri(f"unterminated display name in {text!r}")
        display = text[1:end]
        text = text[end + 1 :].strip()
    if "<" in text:
        lead, _, rest = text.partition("<")
        if display is None and lead.strip():
            display = lead.strip()
        uri_text, sep, params = rest.partition(">")
        if not sep:
            raise MalformedUri(f"unterminated <uri> in {text!r}")
        return NameAddr(parse_uri(uri_text), display, _parse_params(params))
    # addr-spec form: params after the URI belong to the header
    uri_text, _, params = text.partition(";")
    return NameAddr(parse_uri(uri_text), display, _parse_params(params))


BRANCH_MAGIC = "z9hG4bK"


@dataclass(frozen=True)
class Via:
    host: str
    port: int = DEFAULT_PORT
    transport: str = "UDP"
    params: Params = ()
    explicit_port: bool = field(default=True, compare=False, repr=False)

    def __str__(self) -> str:
        hp = self.host
        if self.explicit_port or self.port != DEFAULT_PORT:
            hp += f":{self.port}"
        return f"SIP/2.0/{self.transport} {hp}{_format_params(self.params)}"

    @property
    def branch(self) -> str | None:
        return _get_param(self.params, "branch")

    def param(self, name: str) -> str | None:
        return _get_param(self.params, name)

    def with_param(self, name: str, value: str | None = None) -> Via:
        return replace(self, params=_set_param(self.params, name, value))

    def without_param(self, name: str) -> Via:
        return replace(self, params=_del_param(self.params, name))

    @property
    def response_addr(self) -> tuple[str, int]:
        """Where responses for this hop go: received/rport override sent-by."""
        host = self.param("received") or self.host
        rport = self.param("rport")
        port = int(rport) if rport else self.port
        return (host, port)


def parse_via(text: str) -> Via:
    text = text.strip()
    proto, _, rest = text.partition(" ")
    parts = proto.split("/")
    if len(parts) != 3 or parts[0] != "SIP":
        raise MalformedUri(f"bad Via protocol in {text!r}")
    sent_by, _, params = rest.strip().partition(";")
    host, port = _split_hostport(sent_by.strip())
    return Via(
        host=host,
        port=port if port is not None else DEFAULT_PORT,
        transport=parts[2].upper(),
        params=_parse_params(params),
        explicit_port=port is not None,
    )
