"""Message ladders: captured SIP traffic rendered as stable, diffable lines."""

from __future__ import annotations

import difflib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from ..sip import ParseError, SipRequest, parse_message
from .shim import Datagram

_ADDR_RE = re.compile(r"(\d{1,3}\.\d{1,3}\.\d{1,3}\.\d{1,3})(?::\d+)?")


@dataclass
class Placeholders:
    """Stable names for random tokens, numbered by first appearance."""

    prefix: str
    seen: dict[str, str] = field(default_factory=dict)

    def __call__(self, token: str | None) -> str:
        if not token:
            return "-"
        if token not in self.seen:
            self.seen[token] = f"{self.prefix}{len(self.seen) + 1}"
        return self.seen[token]


def ladder(datagrams: Iterable[Datagram], actor_of: Callable[[str], str]) -> list[str]:
    """One line per distinct transmitted SIP datagram, grouped by call.

    The ladder is the senders' view: a message counts once it is sent, whether
    or not the network delivers it, and byte-identical repeats on the same
    link are retransmissions folded into the first copy. Under loss this view
    keeps its causal order, since nothing is first sent before its cause
    arrived. Lines keep capture order within a Call-ID; calls are
    listed in order of first appearance, which keeps independent calls from
    racing each other in the diff. Call-IDs, tags and branches become
    placeholders numbered in output order.
    """
    seen: set[tuple] = set()
    by_call: dict[str | None, list] = {}

    def hosts(text: str) -> str:
        return _ADDR_RE.sub(lambda m: actor_of(m.group(1)), text)

    for d in datagrams:
        if not d.is_sip:
            continue
        key = (d.src, d.dst, d.data)
        if key in seen:
            continue
        seen.add(key)
        src, dst = actor_of(d.src[0]), actor_of(d.dst[0])
        try:
            msg = parse_message(d.data)
        except ParseError:
            by_call.setdefault(None, []).append((src, dst, None))
            continue
        by_call.setdefault(msg.call_id, []).append((src, dst, msg))

    calls, tags, branches = Placeholders("C"), Placeholders("T"), Placeholders("B")
    lines = []
    for call_id, entries in by_call.items():
        for src, dst, msg in entries:
            if msg is None:
                lines.append(f"{src} -> {dst} <unparseable>")
                continue
            if isinstance(msg, SipRequest):
                head = f"{msg.method.value} {hosts(str(msg.uri))}"
            else:
                head = str(msg.code)
            num, method = msg.cseq
            lines.append(
                f"{src} -> {dst} {head} cseq={num} {method.value} call={calls(call_id)} "
                f"from={tags(msg.from_tag)} to={tags(msg.to_tag)} via={branches(msg.branch)}"
            )
    return lines


def without_provisionals(lines: list[str]) -> list[str]:
    """Drop 1xx lines: provisional responses are never retransmitted, so loss may eat them."""
    return [ln for ln in lines if not re.fullmatch(r"1\d\d", ln.split(" ")[3])]


def compare(actual: list[str], golden: list[str]) -> list[str]:
    """Unified diff of two ladders, empty when they match."""
    if actual == golden:
        return []
    return list(difflib.unified_diff(golden, actual, "golden", "actual", lineterm=""))


def read_ladder(path) -> list[str]:
    text = Path(path).read_text()
    return [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def write_ladder(path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n")
