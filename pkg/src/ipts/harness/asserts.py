"""Checks over a captured run: media paths, message sequences and tone energy."""

from __future__ import annotations

import re
from functools import lru_cache

import numpy as np

from ..b2bua.topology import leaks
from ..media import tone_energy_db
from ..sip import ParseError, SipRequest, parse_message
from .shim import NetShim


class CaptureMissing(RuntimeError):
    pass


def _need_capture(shim: NetShim | None) -> NetShim:
    if shim is None or not shim.capture:
        raise CaptureMissing("packet capture was not enabled for this run")
    return shim


def rtp_count_at(shim: NetShim | None, actor: str) -> int:
    return len(_need_capture(shim).rtp_to(actor))


def assert_no_rtp_at(shim: NetShim | None, actor: str) -> bool:
    """True iff no RTP packet was delivered to any port of ``actor``'s addresses."""
    return rtp_count_at(shim, actor) == 0


def sequence_of(shim: NetShim | None, actor: str) -> list[str]:
    """Method/status tokens of every distinct SIP message ``actor`` sent or received.

    Sends count even when the network dropped them; receipts only when delivered.
    """
    shim = _need_capture(shim)
    tokens, seen = [], set()
    for d in shim.log:
        if not d.is_sip:
            continue
        sent = shim.actor(d.src) == actor
        received = d.delivered and shim.actor(d.dst) == actor
        if not (sent or received):
            continue
        key = (d.src, d.dst, d.data)
        if key in seen:
            continue
        seen.add(key)
        try:
            msg = parse_message(d.data)
        except ParseError:
            continue
        tokens.append(msg.method.value if isinstance(msg, SipRequest) else str(msg.code))
    return tokens


def _token_matches(pattern: str, token: str) -> bool:
    if pattern == "?":
        return True
    if re.fullmatch(r"[1-6]xx", pattern):
        return token.isdigit() and token[0] == pattern[0]
    return pattern == token


def assert_sequence(tokens: list[str], pattern: list[str] | str) -> bool:
    """Match the whole token list against ``pattern``.

    ``*`` matches any run of tokens (including none), ``?`` exactly one, and
    ``2xx`` style classes any status in that class.
    """
    if isinstance(pattern, str):
        pattern = pattern.split()
    pat, toks = tuple(pattern), tuple(tokens)

    @lru_cache(maxsize=None)
    def match(i: int, j: int) -> bool:
        if i == len(pat):
            return j == len(toks)
        if pat[i] == "*":
            return match(i + 1, j) or (j < len(toks) and match(i, j + 1))
        return j < len(toks) and _token_matches(pat[i], toks[j]) and match(i + 1, j + 1)

    return match(0, 0)


def tone_energy(capture, hz: float) -> float:
    """dB relative to a full-scale sine at ``hz`` over the captured samples."""
    samples = np.asarray(capture)
    if samples.size == 0:
        raise CaptureMissing("no audio captured")
    return tone_energy_db(samples, hz)


def leaked_addresses(shim: NetShim | None, border: list[str], internal_hosts: list[str]
                     ) -> list[tuple[str, str]]:
    """(datagram summary, address) for every internal address seen on a border link."""
    shim = _need_capture(shim)
    found = []
    for d in shim.log:
        if shim.actor(d.src) in border or shim.actor(d.dst) in border:
            for host in leaks(d.data, internal_hosts):
                found.append((f"{d.src[0]}->{d.dst[0]}", host))
    return found
