"""HTTP-digest (no qop) credentials as used by REGISTER and INVITE challenges."""

from __future__ import annotations

import hashlib
import re

_PARAM_RE = re.compile(r'(\w+)\s*=\s*("([^"]*)"|[^,\s]+)')


def md5_hex(text: str) -> str:
    return hashlib.md5(text.encode("utf-8")).hexdigest()


def ha1(username: str, realm: str, password: str) -> str:
    return md5_hex(f"{username}:{realm}:{password}")


def digest_response(credential: str, nonce: str, method: str, uri: str) -> str:
    """MD5(HA1:nonce:MD5(method:uri)) where ``credential`` is HA1."""
    return md5_hex(f"{credential}:{nonce}:{md5_hex(f'{method}:{uri}')}")


def parse_digest(value: str) -> dict[str, str]:
    scheme, _, rest = value.strip().partition(" ")
    if scheme.lower() != "digest":
        raise ValueError(f"not a Digest header: {value!r}")
    return {
        m.group(1).lower(): m.group(3) if m.group(3) is not None else m.group(2)
        for m in _PARAM_RE.finditer(rest)
    }


def challenge_header(realm: str, nonce: str, stale: bool = False) -> str:
    value = f'Digest realm="{realm}", nonce="{nonce}", algorithm=MD5'
    if stale:
        value += ", stale=true"
    return value


def authorization_header(
    username: str, realm: str, password: str, nonce: str, method: str, uri: str
) -> str:
    response = digest_response(ha1(username, realm, password), nonce, method, uri)
    return (
        f'Digest username="{username}", realm="{realm}", nonce="{nonce}", '
        f'uri="{uri}", response="{response}", algorithm=MD5'
    )
