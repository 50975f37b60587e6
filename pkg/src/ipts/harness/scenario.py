"""Scenario files: one ``actor verb args...`` step per line.

Actors come into existence with ``start`` lines (``alice start phone tone=440``)
and each gets its own loopback address. The pseudo-actor ``net`` owns the
network shim and plain waits.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_TIMEOUT_MS = 2000

STIMULI = {"register", "call", "answer", "hold", "unhold", "dtmf", "hangup", "transfer",
           "forward", "wait", "kill", "start", "partition", "heal", "loss"}
CHECKS = {"expect", "assert"}
VERBS = STIMULI | CHECKS
KINDS = ("proxy", "b2bua", "trunk", "phone")
NET = "net"

# third octet of each actor kind's loopback subnet
_SUBNET = {"proxy": 1, "b2bua": 2, "phone": 3, "trunk": 9}


class ScenarioError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


@dataclass(frozen=True)
class ScenarioStep:
    line_no: int
    actor: str
    verb: str
    args: tuple[str, ...] = ()
    timeout_ms: int = DEFAULT_TIMEOUT_MS

    @property
    def checks(self) -> bool:
        return self.verb in CHECKS

    def __str__(self) -> str:
        return " ".join((self.actor, self.verb) + self.args)


@dataclass
class ActorSpec:
    name: str
    kind: str
    host: str
    options: dict[str, str] = field(default_factory=dict)
    public_host: str | None = None  # b2bua only: trunk-facing address

    def port(self) -> int:
        return 5080 if self.kind == "b2bua" else 5060


@dataclass
class Scenario:
    name: str
    steps: list[ScenarioStep]
    topology: dict[str, ActorSpec]
    base_dir: Path | None = None

    def actors_of(self, kind: str) -> list[ActorSpec]:
        return [a for a in self.topology.values() if a.kind == kind]


def _options(args) -> dict[str, str]:
    out = {}
    for a in args:
        key, sep, value = a.partition("=")
        if sep:
            out[key] = value
    return out


def parse_scenario(text: str, name: str = "scenario", base_dir: Path | None = None) -> Scenario:
    steps: list[ScenarioStep] = []
    topology: dict[str, ActorSpec] = {}
    counters = {k: 0 for k in KINDS}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            words = shlex.split(line)
        except ValueError as exc:
            raise ScenarioError(line_no, str(exc)) from None
        if len(words) < 2:
            raise ScenarioError(line_no, "expected 'actor verb args...'")
        actor, verb, args = words[0], words[1], words[2:]
        if verb not in VERBS:
            raise ScenarioError(line_no, f"unknown verb {verb!r}")
        timeout = DEFAULT_TIMEOUT_MS
        kept = []
        for a in args:
            if a.startswith("timeout="):
                try:
                    timeout = int(a.split("=", 1)[1])
                except ValueError:
                    raise ScenarioError(line_no, f"bad timeout {a!r}") from None
            else:
                kept.append(a)
        if verb == "start":
            if actor == NET:
                raise ScenarioError(line_no, "'net' cannot be started")
            if not kept or kept[0] not in KINDS:
                raise ScenarioError(line_no, f"start needs a kind from {KINDS}")
            kind = kept[0]
            if actor not in topology:
                counters[kind] += 1
                n = counters[kind]
                spec = ActorSpec(actor, kind, f"127.0.{_SUBNET[kind]}.{n}", _options(kept[1:]))
                if kind == "b2bua":
                    spec.public_host = f"127.0.9.{100 + n}"
                topology[actor] = spec
            elif topology[actor].kind != kind:
                raise ScenarioError(line_no, f"{actor} restarted as a different kind")
        elif actor != NET and actor not in topology:
            raise ScenarioError(line_no, f"actor {actor!r} used before it is started")
        steps.append(ScenarioStep(line_no, actor, verb, tuple(kept), timeout))
    if not steps:
        raise ScenarioError(0, "empty scenario")
    _check_references(steps, topology)
    return Scenario(name, steps, topology, base_dir)


def _check_references(steps, topology) -> None:
    # option values that name actors must name declared ones
    for step in steps:
        if step.verb == "start":
            for key, value in _options(step.args[1:]).items():
                if key in ("b2b", "proxy", "trunk") and value not in topology:
                    raise ScenarioError(step.line_no, f"{key}={value} is not a declared actor")
        elif step.verb == "register":
            for proxy in step.args[2:]:
                if proxy not in topology:
                    raise ScenarioError(step.line_no, f"unknown proxy {proxy!r}")
        elif step.verb in ("partition", "heal") and step.args:
            for a in step.args:
                if a not in topology:
                    raise ScenarioError(step.line_no, f"unknown actor {a!r}")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return parse_scenario(path.read_text(), path.stem, path.parent)
