"""Proxy/registrar configuration and its INI loader."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..net import Addr
from ..sip import MAX_MESSAGE_BYTES
from ..patterns import BadPattern, compile_pattern


class ConfigError(ValueError):
    pass


def parse_addr(text: str, default_port: int = 5060) -> Addr:
    host, sep, port = text.strip().rpartition(":")
    if not sep:
        return (text.strip(), default_port)
    if not port.isdigit():
        raise ConfigError(f"bad address {text!r}")
    return (host, int(port))


@dataclass
class ProxyConfig:
    host: str = "127.0.0.1"
    port: int = 5060
    domain: str = "pbx"
    tcp: bool = False
    external_prefix: str = "9"
    conference_pattern: str = "30XX"
    voicemail_ext: str = "4000"
    ivr_ext: str = "5000"
    moh_ext: str = "7000"
    max_forwards_default: int = 70
    max_message_bytes: int = MAX_MESSAGE_BYTES
    b2bua_addr: Addr | None = None
    media_addr: Addr | None = None
    users_file: Path | None = None
    journal_file: Path | None = None
    cdr_file: Path | None = None
    authenticate_invites: bool = True
    no_answer_timeout: float = 20.0
    voicemail_on_no_answer: bool = True
    trusted_hosts: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.validate()

    @property
    def feature_extensions(self) -> dict[str, str]:
        return {"voicemail": self.voicemail_ext, "ivr": self.ivr_ext, "moh": self.moh_ext}

    def validate(self) -> None:
        if not self.external_prefix.isdigit():
            raise ConfigError("external_prefix must be digits")
        try:
            compile_pattern(self.conference_pattern)
        except BadPattern as exc:
            raise ConfigError(str(exc)) from None
        exts = [e for e in self.feature_extensions.values() if e]
        if len(set(exts)) != len(exts):
            raise ConfigError("feature extensions must be pairwise distinct")
        for e in exts:
            if not e.isdigit():
                raise ConfigError(f"feature extension {e!r} is not numeric")
            if e.startswith(self.external_prefix):
                raise ConfigError(f"feature extension {e} starts with the external prefix")

    def is_trusted(self, host: str) -> bool:
        peers = set(self.trusted_hosts)
        if self.b2bua_addr:
            peers.add(self.b2bua_addr[0])
        if self.media_addr:
            peers.add(self.media_addr[0])
        return host in peers


_BOOL = {"1": True, "yes": True, "true": True, "on": True,
         "0": False, "no": False, "false": False, "off": False}


def _convert(name: str, raw: str, base: Path):
    raw = raw.strip()
    if name in ("port", "max_forwards_default", "max_message_bytes"):
        return int(raw)
    if name in ("no_answer_timeout",):
        return float(raw)
    if name in ("tcp", "authenticate_invites", "voicemail_on_no_answer"):
        if raw.lower() not in _BOOL:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL[raw.lower()]
    if name in ("b2bua_addr", "media_addr"):
        return parse_addr(raw) if raw else None
    if name in ("users_file", "journal_file", "cdr_file"):
        return (base / raw) if raw else None
    if name == "trusted_hosts":
        return tuple(h.strip() for h in raw.split(",") if h.strip())
    return raw


def read_ini(path: str | Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    path = Path(path)
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    return parser


def load_proxy_config(path: str | Path, **overrides) -> ProxyConfig:
    """``[server]`` and ``[dialplan]`` sections feed ProxyConfig fields by name."""
    path = Path(path)
    parser = read_ini(path)
    names = {f.name for f in fields(ProxyConfig)}
    values = {}
    for section in ("server", "dialplan"):
        if not parser.has_section(section):
            continue
        for key, raw in parser.items(section):
            if key not in names:
                continue
            try:
                values[key] = _convert(key, raw, path.parent)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    values.update(overrides)
    return ProxyConfig(**values)
