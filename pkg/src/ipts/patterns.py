"""Dial patterns: ``X`` is any digit; a trailing ``.`` accepts any further digits,
so ``9X.`` is 9 followed by one or more digits and a lone ``.`` is one or more."""

from __future__ import annotations

import functools
import re


class BadPattern(ValueError):
    pass


@functools.lru_cache(maxsize=256)
def compile_pattern(pattern: str) -> re.Pattern:
    if not pattern:
        raise BadPattern("empty pattern")
    out = []
    for i, ch in enumerate(pattern):
        if ch in "Xx":
            out.append("[0-9]")
        elif ch == ".":
            if i != len(pattern) - 1:
                raise BadPattern(f"'.' must be last in {pattern!r}")
            # a bare "." still needs one digit
            out.append("[0-9]*" if i else "[0-9]+")
        elif ch.isdigit() or ch in "*#":
            out.append(re.escape(ch))
        else:
            raise BadPattern(f"bad character {ch!r} in {pattern!r}")
    return re.compile("^" + "".join(out) + "$")


def matches(pattern: str, digits: str) -> bool:
    return bool(compile_pattern(pattern).match(digits))


def is_literal(pattern: str) -> bool:
    return all(ch.isdigit() or ch in "*#" for ch in pattern)
