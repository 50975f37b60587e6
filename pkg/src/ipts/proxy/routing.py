"""Pure routing: sanity checks, dialed-digit classification, fork outcome."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

from ..patterns import matches
from ..registrar import Binding, LocationStore, Subscriber
from ..sip import (
    MANDATORY_HEADERS,
    SipMessage,
    SipRequest,
    SipUri,
    StatusCode,
    serialize_message,
)
from .config import ProxyConfig


class FeatureKind(str, enum.Enum):
    MOH = "moh"
    VOICEMAIL = "voicemail"
    CONFERENCE = "conference"
    IVR = "ivr"


@dataclass(frozen=True)
class Internal:
    contacts: tuple[Binding, ...]


@dataclass(frozen=True)
class External:
    trunk_digits: str


@dataclass(frozen=True)
class Feature:
    kind: FeatureKind
    # conference room digits, or the mailbox extension for voicemail
    arg: str | None = None


@dataclass(frozen=True)
class Reject:
    status: StatusCode

    @classmethod
    def of(cls, code: int) -> Reject:
        return cls(StatusCode(code))


RoutingDecision = Union[Internal, External, Feature, Reject]


def sanity_check(msg: SipMessage, cfg: ProxyConfig) -> Reject | None:
    """None when the message may be processed further."""
    if len(serialize_message(msg)) > cfg.max_message_bytes:
        return Reject.of(413)
    required = MANDATORY_HEADERS if isinstance(msg, SipRequest) else MANDATORY_HEADERS[:-1]
    for name in required:
        if not msg.has_header(name):
            return Reject.of(400)
    if isinstance(msg, SipRequest):
        mf = msg.max_forwards
        if mf is None:
            return Reject.of(400)
        if mf <= 0:
            return Reject.of(483)
        try:
            if msg.cseq[1] != msg.method:
                return Reject.of(400)
        except ValueError:
            return Reject.of(400)
    return None


def classify_digits(
    digits: str,
    cfg: ProxyConfig,
    subscribers: dict[str, Subscriber],
    bindings_for,
    caller: Subscriber | None,
    *,
    trusted: bool = False,
) -> RoutingDecision:
    """Map dialed digits to exactly one decision.

    ``bindings_for(ext)`` returns the live bindings of a subscriber.
    """
    if not digits or not digits.isdigit():
        return Reject.of(404)
    prefix = cfg.external_prefix
    if digits.startswith(prefix):
        if len(digits) == len(prefix):
            return Reject.of(404)
        allowed = trusted or (caller is not None and caller.can_call_external)
        if not allowed:
            return Reject.of(403)
        return External(digits[len(prefix):])
    if matches(cfg.conference_pattern, digits):
        return Feature(FeatureKind.CONFERENCE, digits)
    if digits == cfg.voicemail_ext:
        return Feature(FeatureKind.VOICEMAIL, None)
    if digits == cfg.ivr_ext:
        return Feature(FeatureKind.IVR)
    if digits == cfg.moh_ext:
        return Feature(FeatureKind.MOH)
    if digits in subscribers:
        contacts = tuple(bindings_for(digits))
        if contacts:
            return Internal(contacts)
        # registered subscriber with no reachable device goes straight to voicemail
        return Feature(FeatureKind.VOICEMAIL, digits)
    return Reject.of(404)


def route(
    req: SipRequest,
    store: LocationStore,
    cfg: ProxyConfig,
    now: float,
    caller: Subscriber | None = None,
    *,
    trusted: bool = False,
) -> RoutingDecision:
    digits = req.uri.user or ""

    def bindings_for(ext: str):
        return store.lookup(SipUri(cfg.domain, ext), now)

    return classify_digits(digits, cfg, store.subscribers, bindings_for, caller,
                           trusted=trusted)


def best_response(codes) -> int:
    """Pick what the caller sees when every fork branch failed.

    Any 6xx wins outright (the lowest 6xx if several); otherwise the lowest
    final code.
    """
    codes = list(codes)
    if not codes:
        return 408
    global_failures = [c for c in codes if 600 <= c <= 699]
    return min(global_failures or codes)
