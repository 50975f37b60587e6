"""Subscriber database, location bindings and REGISTER handling.

Storage is two plain files: a users file (one subscriber per line) and an
append-only binding journal. Several servers may share one journal; each
tails it on lookup, so a binding written by one is served by all.
"""

from __future__ import annotations

import enum
import hmac
import logging
import os
import re
import secrets
from dataclasses import dataclass, field
from pathlib import Path

from .sip import SipRequest, SipResponse, SipUri, build_response, parse_uri
from .sip.digest import challenge_header, digest_response, parse_digest
from .sip.uri import MalformedUri, parse_name_addr

log = logging.getLogger(__name__)

DEFAULT_EXPIRES = 3600
MIN_EXPIRES = 60
MAX_EXPIRES = 86400
NONCE_TTL = 60.0


class Privilege(str, enum.Enum):
    INTERNAL = "internal"
    EXTERNAL = "external"


class MalformedUserFile(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"users file line {line_no}: {reason}")
        self.line_no = line_no


class JournalCorrupt(ValueError):
    def __init__(self, offset: int, reason: str):
        super().__init__(f"binding journal corrupt at byte {offset}: {reason}")
        self.offset = offset


class StaleNonce(Exception):
    pass


@dataclass(frozen=True)
class Subscriber:
    extension: str
    display_name: str
    credential: str  # MD5(extension:realm:password)
    privilege: Privilege = Privilege.INTERNAL

    @property
    def can_call_external(self) -> bool:
        return self.privilege == Privilege.EXTERNAL


@dataclass(frozen=True)
class Binding:
    aor: SipUri
    contact: SipUri
    expires_at: float
    registered_at: float = field(default=0.0, compare=False)

    def remaining(self, now: float) -> int:
        return max(0, int(self.expires_at - now))


_EXT_RE = re.compile(r"^\d+$")
_HEX_RE = re.compile(r"^[0-9a-f]{32}$")


def parse_users(text: str, *, external_prefix: str | None = None) -> dict[str, Subscriber]:
    subs: dict[str, Subscriber] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise MalformedUserFile(line_no, f"expected 4 fields, got {len(parts)}")
        ext, name, digest, priv = parts
        if not _EXT_RE.match(ext):
            raise MalformedUserFile(line_no, f"extension {ext!r} is not numeric")
        if external_prefix and ext.startswith(external_prefix):
            raise MalformedUserFile(line_no, f"extension {ext} starts with the external prefix")
        if not _HEX_RE.match(digest.lower()):
            raise MalformedUserFile(line_no, "credential must be a 32-digit hex MD5")
        try:
            privilege = Privilege(priv.lower())
        except ValueError:
            raise MalformedUserFile(line_no, f"unknown privilege {priv!r}") from None
        if ext in subs:
            raise MalformedUserFile(line_no, f"duplicate extension {ext}")
        subs[ext] = Subscriber(ext, name, digest.lower(), privilege)
    return subs


def format_users(subs) -> str:
    lines = ["# extension,display_name,digest_hex,privilege"]
    for s in sorted(subs, key=lambda s: s.extension):
        lines.append(f"{s.extension},{s.display_name},{s.credential},{s.privilege.value}")
    return "\n".join(lines) + "\n"


def _aor_key(aor: SipUri | str) -> str:
    if isinstance(aor, str):
        aor = parse_uri(aor)
    return aor.aor()


class LocationStore:
    """Subscribers plus unexpired bindings, backed by the users file and journal."""

    def __init__(
        self,
        subscribers: dict[str, Subscriber] | None = None,
        journal_path: str | Path | None = None,
        users_path: str | Path | None = None,
        external_prefix: str | None = None,
    ):
        self.subscribers = dict(subscribers or {})
        self.bindings: dict[str, list[Binding]] = {}
        self.journal_path = Path(journal_path) if journal_path else None
        self.users_path = Path(users_path) if users_path else None
        self.external_prefix = external_prefix
        self._journal_offset = 0
        self._users_stamp: tuple[int, int] | None = None
        if self.users_path is not None:
            self.reload_users(force=True)
        if self.journal_path is not None:
            self.journal_path.parent.mkdir(parents=True, exist_ok=True)
            self.journal_path.touch(exist_ok=True)
            self.refresh()

    # subscribers -------------------------------------------------------------

    def reload_users(self, force: bool = False) -> bool:
        """Re-read the users file if it changed on disk; True when reloaded."""
        if self.users_path is None:
            return False
        try:
            st = self.users_path.stat()
        except FileNotFoundError:
            st = None
        stamp = (st.st_mtime_ns, st.st_size) if st else (0, 0)
        if not force and stamp == self._users_stamp:
            return False
        text = self.users_path.read_text() if st else ""
        self.subscribers = parse_users(text, external_prefix=self.external_prefix)
        self._users_stamp = stamp
        log.info("loaded %d subscribers from %s", len(self.subscribers), self.users_path)
        return True

    def subscriber(self, extension: str | None) -> Subscriber | None:
        if extension is None:
            return None
        return self.subscribers.get(extension)

    # bindings ----------------------------------------------------------------

    def _apply(self, op: str, binding: Binding) -> None:
        key = binding.aor.aor()
        current = [b for b in self.bindings.get(key, []) if b.contact != binding.contact]
        if op == "ADD":
            current.append(binding)
        if current:
            self.bindings[key] = current
        else:
            self.bindings.pop(key, None)

    def journal_binding(self, binding: Binding, op: str = "ADD") -> None:
        if op not in ("ADD", "DEL"):
            raise ValueError(op)
        self._apply(op, binding)
        if self.journal_path is None:
            return
        line = f"{op} {binding.aor} {binding.contact} {binding.expires_at:.3f}\n"
        fd = os.open(self.journal_path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line.encode("utf-8"))
        finally:
            os.close(fd)

    def add_binding(self, binding: Binding) -> None:
        if binding.aor.user not in self.subscribers:
            raise KeyError(f"no subscriber for {binding.aor}")
        self.journal_binding(binding, "ADD")

    def remove_binding(self, aor: SipUri, contact: SipUri, now: float) -> None:
        self.journal_binding(Binding(aor, contact, now, now), "DEL")

    def refresh(self) -> None:
        """Apply journal records appended since the last read (possibly by peers)."""
        if self.journal_path is None:
            return
        with open(self.journal_path, "rb") as fh:
            fh.seek(self._journal_offset)
            data = fh.read()
        offset = self._journal_offset
        for raw in data.splitlines(keepends=True):
            if not raw.endswith(b"\n"):
                break  # torn tail write; picked up on a later refresh
            self._apply_journal_line(raw, offset)
            offset += len(raw)
        self._journal_offset = offset

    def _apply_journal_line(self, raw: bytes, offset: int) -> None:
        try:
            parts = raw.decode("utf-8").split()
        except UnicodeDecodeError:
            raise JournalCorrupt(offset, "not UTF-8") from None
        if not parts:
            return
        if len(parts) != 4 or parts[0] not in ("ADD", "DEL"):
            raise JournalCorrupt(offset, f"bad record {raw!r}")
        try:
            aor, contact = parse_uri(parts[1]), parse_uri(parts[2])
            expires_at = float(parts[3])
        except (MalformedUri, ValueError) as exc:
            raise JournalCorrupt(offset, str(exc)) from None
        self._apply(parts[0], Binding(aor, contact, expires_at, expires_at))

    def lookup(self, aor: SipUri | str, now: float) -> list[Binding]:
        self.refresh()
        key = _aor_key(aor)
        if self.subscribers and parse_uri(key).user not in self.subscribers:
            return []
        return [b for b in self.bindings.get(key, []) if b.expires_at > now]

    def expire_bindings(self, now: float) -> int:
        count = 0
        for key in list(self.bindings):
            live = [b for b in self.bindings[key] if b.expires_at > now]
            count += len(self.bindings[key]) - len(live)
            if live:
                self.bindings[key] = live
            else:
                del self.bindings[key]
        return count

    def all_bindings(self, now: float) -> list[Binding]:
        self.refresh()
        return [b for bs in self.bindings.values() for b in bs if b.expires_at > now]


def load_users(path: str | Path, journal_path: str | Path | None = None,
               external_prefix: str | None = None) -> LocationStore:
    return LocationStore(journal_path=journal_path, users_path=path,
                         external_prefix=external_prefix)


class NonceStore:
    """Single-use nonces with a fixed validity window."""

    def __init__(self, ttl: float = NONCE_TTL):
        self.ttl = ttl
        self._issued: dict[str, float] = {}

    def issue(self, now: float) -> str:
        self._purge(now)
        nonce = secrets.token_hex(16)
        self._issued[nonce] = now
        return nonce

    def consume(self, nonce: str, now: float) -> None:
        issued = self._issued.pop(nonce, None)
        if issued is None or now - issued > self.ttl:
            raise StaleNonce(nonce)

    def _purge(self, now: float) -> None:
        for n, t in list(self._issued.items()):
            if now - t > self.ttl:
                del self._issued[n]


def verify_digest(req: SipRequest, credential: str, nonce: str,
                  header: str = "Authorization") -> bool:
    """Pure check of the response digest carried by ``req``."""
    value = req.header(header)
    if value is None:
        return False
    try:
        params = parse_digest(value)
    except ValueError:
        return False
    if params.get("nonce") != nonce:
        return False
    expected = digest_response(credential, nonce, req.method.value, params.get("uri", ""))
    return hmac.compare_digest(expected, params.get("response", ""))


def authenticate(req: SipRequest, subscriber: Subscriber, nonces: NonceStore, now: float,
                 header: str = "Authorization") -> bool:
    """Verify and burn the nonce; raises StaleNonce for unknown/used/expired nonces."""
    value = req.header(header)
    if value is None:
        return False
    try:
        params = parse_digest(value)
    except ValueError:
        return False
    if params.get("username") != subscriber.extension:
        return False
    nonce = params.get("nonce", "")
    nonces.consume(nonce, now)
    return verify_digest(req, subscriber.credential, nonce, header)


class Registrar:
    def __init__(
        self,
        store: LocationStore,
        realm: str,
        *,
        default_expires: int = DEFAULT_EXPIRES,
        min_expires: int = MIN_EXPIRES,
        nonce_ttl: float = NONCE_TTL,
    ):
        self.store = store
        self.realm = realm
        self.default_expires = default_expires
        self.min_expires = min_expires
        self.nonces = NonceStore(nonce_ttl)

    def challenge(self, req: SipRequest, now: float, *, proxy: bool = False,
                  stale: bool = False) -> SipResponse:
        code, name = (407, "Proxy-Authenticate") if proxy else (401, "WWW-Authenticate")
        nonce = self.nonces.issue(now)
        return build_response(req, code, headers=((name, challenge_header(self.realm, nonce, stale)),))

    def check(self, req: SipRequest, subscriber: Subscriber, now: float, *, proxy: bool = False
              ) -> SipResponse | None:
        """None when ``req`` carries valid credentials, otherwise the challenge to send."""
        header = "Proxy-Authorization" if proxy else "Authorization"
        if not req.has_header(header):
            return self.challenge(req, now, proxy=proxy)
        try:
            ok = authenticate(req, subscriber, self.nonces, now, header)
        except StaleNonce:
            return self.challenge(req, now, proxy=proxy, stale=True)
        return None if ok else self.challenge(req, now, proxy=proxy)

    def handle_register(self, req: SipRequest, now: float) -> SipResponse:
        self.store.reload_users()
        aor = req.to_addr.uri.without_params()
        subscriber = self.store.subscriber(aor.user)
        if subscriber is None:
            return build_response(req, 404)
        denied = self.check(req, subscriber, now)
        if denied is not None:
            return denied

        header_expires = req.header("Expires")
        try:
            default = int(header_expires) if header_expires is not None else self.default_expires
        except ValueError:
            return build_response(req, 400, "Bad Expires")

        contacts = req.header_values("Contact")
        if any(c.strip() == "*" for c in contacts):
            if default != 0 or len(contacts) != 1:
                return build_response(req, 400, "Wildcard Contact Needs Expires 0")
            for b in self.store.lookup(aor, now):
                self.store.remove_binding(aor, b.contact, now)
            contacts = []

        changes = []
        for value in contacts:
            try:
                na = parse_name_addr(value)
            except MalformedUri:
                return build_response(req, 400, "Bad Contact")
            param = na.param("expires")
            try:
                expires = int(param) if param else default
            except ValueError:
                return build_response(req, 400, "Bad Contact Expires")
            if 0 < expires < self.min_expires:
                return build_response(req, 423, headers=(("Min-Expires", str(self.min_expires)),))
            changes.append((na.uri, min(expires, MAX_EXPIRES)))

        for contact, expires in changes:
            if expires == 0:
                self.store.remove_binding(aor, contact, now)
            else:
                self.store.add_binding(Binding(aor, contact, now + expires, now))

        active = self.store.lookup(aor, now)
        headers = tuple(("Contact", f"<{b.contact}>;expires={b.remaining(now)}") for b in active)
        return build_response(req, 200, headers=headers)
