"""Dialplan rules: ``priority,pattern,action[,arg]`` lines, first match wins."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

from ..patterns import BadPattern, compile_pattern, is_literal, matches


class Action(str, enum.Enum):
    BRIDGE = "bridge"
    MOH = "moh"
    VOICEMAIL = "voicemail"
    CONFERENCE = "conference"
    IVR = "ivr"


class NoMatch(LookupError):
    pass


class BadDialplan(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"dialplan line {line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class DialplanRule:
    priority: int
    pattern: str
    action: Action
    arg: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "action", Action(self.action))
        compile_pattern(self.pattern)

    def sort_key(self) -> tuple[int, int]:
        # literals beat wildcards at equal priority
        return (self.priority, 0 if is_literal(self.pattern) else 1)


def parse_dialplan(text: str) -> list[DialplanRule]:
    rules = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) not in (3, 4):
            raise BadDialplan(no, f"expected 3 or 4 fields, got {len(parts)}")
        try:
            rules.append(DialplanRule(int(parts[0]), parts[1], Action(parts[2]),
                                      parts[3] if len(parts) == 4 and parts[3] else None))
        except (ValueError, BadPattern) as exc:
            raise BadDialplan(no, str(exc)) from None
    return sorted(rules, key=DialplanRule.sort_key)


def load_dialplan(path: str | Path) -> list[DialplanRule]:
    return parse_dialplan(Path(path).read_text())


def match_dialplan(digits: str, rules) -> DialplanRule:
    for rule in sorted(rules, key=DialplanRule.sort_key):
        if digits and matches(rule.pattern, digits):
            return rule
    raise NoMatch(digits)


def default_dialplan(*, external_prefix: str = "9", conference_pattern: str = "30XX",
                     voicemail_ext: str = "4000", ivr_ext: str = "5000",
                     moh_ext: str = "7000", trunk: str = "trunk0") -> list[DialplanRule]:
    return sorted([
        DialplanRule(10, f"{external_prefix}X.", Action.BRIDGE, trunk),
        DialplanRule(20, conference_pattern, Action.CONFERENCE),
        DialplanRule(30, voicemail_ext, Action.VOICEMAIL),
        DialplanRule(30, ivr_ext, Action.IVR),
        DialplanRule(30, moh_ext, Action.MOH),
    ], key=DialplanRule.sort_key)
