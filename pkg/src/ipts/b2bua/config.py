"""B2BUA configuration: listener addresses, trunks, IVR menu, dialplan."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from ..net import Addr
from ..proxy.config import ConfigError, parse_addr, read_ini
from .dialplan import BadDialplan, DialplanRule, default_dialplan, load_dialplan


@dataclass(frozen=True)
class TrunkProfile:
    provider_addr: Addr
    username: str = ""
    password: str = ""
    from_domain: str = "trunk"
    name: str = "trunk0"

    def credentials(self, realm: str) -> tuple[str, str] | None:
        if not self.username:
            return None
        return (self.username, self.password)


@dataclass(frozen=True)
class IvrMenu:
    greeting_file: Path | None = None
    digit_map: dict[str, str] = field(default_factory=dict)
    timeout_s: float = 5.0
    invalid_file: Path | None = None
    max_attempts: int = 3

    def __post_init__(self):
        for key in self.digit_map:
            if len(key) != 1 or not key.isdigit():
                raise ConfigError(f"IVR key {key!r} must be a single digit 0-9")
        if self.timeout_s <= 0 or self.max_attempts < 1:
            raise ConfigError("IVR timeout and attempts must be positive")


def parse_digit_map(text: str) -> dict[str, str]:
    out = {}
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, ext = item.partition(":")
        if not sep or not ext.strip().isdigit():
            raise ConfigError(f"bad IVR map entry {item!r}")
        out[key.strip()] = ext.strip()
    return out


@dataclass
class B2buaConfig:
    host: str = "127.0.0.1"
    port: int = 5080
    # signaling and media address used towards trunks
    public_host: str = "127.0.0.1"
    public_port: int = 5090
    media_host: str | None = None
    public_media_host: str | None = None
    proxy_addr: Addr | None = None
    domain: str = "pbx"
    external_prefix: str = "9"
    vmdir: Path = Path("voicemail")
    prompts_dir: Path = Path("prompts")
    rtp_low: int = 20000
    rtp_high: int = 29998
    conference_capacity: int = 8
    voicemail_max_s: float = 120.0
    min_free_bytes: int = 1 << 20
    trunks: dict[str, TrunkProfile] = field(default_factory=dict)
    ivr: IvrMenu = field(default_factory=IvrMenu)
    rules: list[DialplanRule] = field(default_factory=list)

    def __post_init__(self):
        if not self.rules:
            self.rules = default_dialplan(external_prefix=self.external_prefix)

    @property
    def inside_media(self) -> str:
        return self.media_host or self.host

    @property
    def outside_media(self) -> str:
        return self.public_media_host or self.public_host


_INTS = {"port", "public_port", "rtp_low", "rtp_high", "conference_capacity", "min_free_bytes"}
_FLOATS = {"voicemail_max_s"}
_PATHS = {"vmdir", "prompts_dir"}
_STRS = {"host", "public_host", "media_host", "public_media_host", "domain", "external_prefix"}


def load_b2bua_config(path: str | Path, **overrides) -> B2buaConfig:
    path = Path(path)
    base = path.parent
    ini = read_ini(path)
    values: dict = {}
    if ini.has_section("server"):
        for key, raw in ini.items("server"):
            raw = raw.strip()
            try:
                if key in _INTS:
                    values[key] = int(raw)
                elif key in _FLOATS:
                    values[key] = float(raw)
                elif key in _PATHS:
                    values[key] = base / raw
                elif key in _STRS:
                    values[key] = raw
                elif key == "proxy":
                    values["proxy_addr"] = parse_addr(raw)
            except ValueError as exc:
                raise ConfigError(f"[server] {key}: {exc}") from None

    trunks = {}
    for section in ini.sections():
        if section != "trunk" and not section.startswith("trunk:"):
            continue
        name = section.partition(":")[2] or "trunk0"
        sec = ini[section]
        if "provider" not in sec:
            raise ConfigError(f"[{section}] needs provider = host:port")
        trunks[name] = TrunkProfile(
            provider_addr=parse_addr(sec["provider"]),
            username=sec.get("username", ""),
            password=sec.get("password", ""),
            from_domain=sec.get("from_domain", "trunk"),
            name=name,
        )
    values["trunks"] = trunks

    if ini.has_section("ivr"):
        sec = ini["ivr"]
        values["ivr"] = IvrMenu(
            greeting_file=base / sec["greeting"] if sec.get("greeting") else None,
            digit_map=parse_digit_map(sec.get("map", "")),
            timeout_s=float(sec.get("timeout_s", "5")),
            invalid_file=base / sec["invalid"] if sec.get("invalid") else None,
            max_attempts=int(sec.get("attempts", "3")),
        )

    if ini.has_section("dialplan"):
        sec = ini["dialplan"]
        if sec.get("file"):
            try:
                values["rules"] = load_dialplan(base / sec["file"])
            except BadDialplan as exc:
                raise ConfigError(str(exc)) from None
        else:
            values["rules"] = default_dialplan(
                external_prefix=values.get("external_prefix", "9"),
                conference_pattern=sec.get("conference_pattern", "30XX"),
                voicemail_ext=sec.get("voicemail_ext", "4000"),
                ivr_ext=sec.get("ivr_ext", "5000"),
                moh_ext=sec.get("moh_ext", "7000"),
            )
    values.update(overrides)
    return B2buaConfig(**values)
