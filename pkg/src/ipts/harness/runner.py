"""Runs a scenario against live components on loopback and reports per-step verdicts."""

from __future__ import annotations

import asyncio
import logging
import re
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from ..b2bua import B2bua
from ..b2bua.config import B2buaConfig, IvrMenu, TrunkProfile, parse_digit_map
from ..proxy import ProxyServer
from ..proxy.cdr import read_cdrs
from ..proxy.config import ProxyConfig
from ..registrar import Privilege, Subscriber, format_users, parse_users
from ..sip.digest import ha1
from ..transaction import TimerConfig
from ..ua import InvalidTransition, Phone
from . import asserts
from .ladder import compare, ladder, read_ladder, without_provisionals, write_ladder
from .scenario import ActorSpec, Scenario, ScenarioStep
from .shim import NetShim
from .trunk import TrunkSim

log = logging.getLogger(__name__)

POLL_S = 0.01


class StepTimeout(Exception):
    def __init__(self, step: ScenarioStep, waited_for: str = ""):
        super().__init__(f"timed out after {step.timeout_ms} ms waiting for {waited_for or step}")
        self.step = step


class AssertFailed(Exception):
    def __init__(self, step: ScenarioStep, detail: str):
        super().__init__(detail)
        self.step = step
        self.detail = detail


@dataclass
class StepResult:
    number: int
    step: ScenarioStep
    passed: bool
    detail: str
    at: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.number} {self.detail}"


@dataclass
class Report:
    scenario: str
    seed: int
    loss: float
    results: list[StepResult] = field(default_factory=list)
    ladder: list[str] = field(default_factory=list)
    calls_attempted: int = 0
    calls_completed: int = 0
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    @property
    def verdicts(self) -> list[tuple[int, bool]]:
        return [(r.number, r.passed) for r in self.results]

    @property
    def completion_rate(self) -> float | None:
        if not self.calls_attempted:
            return None
        return self.calls_completed / self.calls_attempted

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]

    def text(self, with_ladder: bool = True) -> str:
        out = [f"scenario {self.scenario} seed={self.seed} loss={self.loss:g}"]
        out += self.lines()
        if with_ladder and self.ladder:
            out.append("-- ladder")
            out += self.ladder
        rate = self.completion_rate
        if rate is not None:
            out.append(f"-- calls completed {self.calls_completed}/{self.calls_attempted}"
                       f" ({rate:.0%})")
        out.append(f"-- {'PASS' if self.passed else 'FAIL'} in {self.elapsed_s:.1f}s")
        return "\n".join(out)


def _user_entries(spec: str) -> list[Subscriber]:
    """``2001:pw1:external,2002:pw2`` -> subscribers (privilege defaults to internal)."""
    subs = []
    for item in spec.split(","):
        if not item:
            continue
        parts = item.split(":")
        ext, password = parts[0], parts[1]
        priv = Privilege(parts[2]) if len(parts) > 2 else Privilege.INTERNAL
        subs.append(Subscriber(ext, f"User {ext}", ha1(ext, "pbx", password), priv))
    return subs


def _bool(value: str) -> bool:
    return value.lower() in ("1", "yes", "true", "on")


class Runner:
    """Executes one scenario.

    Components all live in this process on one event loop, each bound to its
    own loopback address; only sockets connect them.
    """

    def __init__(self, scenario: Scenario, shim: NetShim | None = None, *, seed: int = 0,
                 workdir: Path | None = None, timers: TimerConfig | None = None,
                 bless: bool = False, golden_dir: Path | None = None):
        self.scenario = scenario
        self.shim = shim if shim is not None else NetShim(seed=seed)
        self.shim.seed = seed
        self.seed = seed
        self.timers = timers or TimerConfig()
        self.bless = bless
        self.golden_dir = golden_dir or scenario.base_dir
        self._own_workdir = workdir is None
        self.workdir = Path(workdir or tempfile.mkdtemp(prefix="ipts-"))
        self.actors: dict[str, object] = {}
        self.specs = scenario.topology
        self.cursors: dict[str, int] = {}
        self.users: dict[str, Subscriber] = {}
        for spec in self.specs.values():
            self.shim.hosts[spec.host] = spec.name
            if spec.public_host:
                self.shim.hosts[spec.public_host] = f"{spec.name}.ext"

    # topology --------------------------------------------------------------

    def addr_of(self, name: str) -> tuple[str, int]:
        spec = self.specs[name]
        return (spec.host, spec.port())

    def _write_users(self, spec: ActorSpec) -> Path:
        path = self.workdir / "users"
        for sub in _user_entries(spec.options.get("users", "")):
            self.users[sub.extension] = sub
        if path.exists():
            for sub in parse_users(path.read_text()).values():
                self.users.setdefault(sub.extension, sub)
        path.write_text(format_users(self.users.values()))
        return path

    def _make_proxy(self, spec: ActorSpec) -> ProxyServer:
        o = spec.options
        b2b = o.get("b2b")
        b2b_addr = self.addr_of(b2b) if b2b else None
        cfg = ProxyConfig(
            host=spec.host, port=spec.port(),
            users_file=self._write_users(spec),
            journal_file=self.workdir / "journal",
            cdr_file=self.workdir / f"cdr-{spec.name}.csv",
            b2bua_addr=b2b_addr,
            no_answer_timeout=float(o.get("no_answer", 20)),
            authenticate_invites=_bool(o.get("auth", "1")),
        )
        return ProxyServer(cfg, clock=None, timers=self.timers, name=spec.name)

    def _make_b2bua(self, spec: ActorSpec) -> B2bua:
        o = spec.options
        trunks = {}
        if "trunk" in o:
            tspec = self.specs[o["trunk"]]
            trunks["trunk0"] = TrunkProfile(
                self.addr_of(tspec.name), tspec.options.get("user", "trunkuser"),
                tspec.options.get("pass", "secret"), "trunk")
        ivr = IvrMenu(digit_map=parse_digit_map(o.get("ivr", "")),
                      timeout_s=float(o.get("ivr_timeout", 5)),
                      max_attempts=int(o.get("ivr_attempts", 3)))
        cfg = B2buaConfig(
            host=spec.host, port=spec.port(), public_host=spec.public_host, public_port=5090,
            proxy_addr=self.addr_of(o["proxy"]) if "proxy" in o else None,
            vmdir=self.workdir / "voicemail", prompts_dir=self.workdir / "prompts",
            voicemail_max_s=float(o.get("vm_max", 120)), trunks=trunks, ivr=ivr,
        )
        return B2bua(cfg, timers=self.timers)

    def _make_trunk(self, spec: ActorSpec) -> TrunkSim:
        o = spec.options
        reply = o.get("reply")
        return TrunkSim(spec.host, spec.port(), username=o.get("user", "trunkuser"),
                        password=o.get("pass", "secret"),
                        challenge=int(o.get("challenge", 407)),
                        answer_after=float(o.get("answer_after", 0.2)),
                        reply=int(reply) if reply else None, timers=self.timers, name=spec.name)

    def _make_phone(self, spec: ActorSpec) -> Phone:
        o = spec.options
        tone = o.get("tone")
        return Phone(spec.host, spec.port(), name=spec.name, timers=self.timers,
                     tone_hz=float(tone) if tone else None,
                     ring_timeout_s=float(o.get("ring_timeout", 30)))

    async def _start(self, name: str) -> None:
        spec = self.specs[name]
        old = self.actors.pop(name, None)
        if old is not None:
            old.close()
        maker = {"proxy": self._make_proxy, "b2bua": self._make_b2bua,
                 "trunk": self._make_trunk, "phone": self._make_phone}[spec.kind]
        actor = maker(spec)
        await actor.start(self.shim)
        self.actors[name] = actor
        self.cursors[name] = 0

    # steps -----------------------------------------------------------------

    def phone(self, step: ScenarioStep) -> Phone:
        actor = self.actors.get(step.actor)
        if not isinstance(actor, Phone):
            raise AssertFailed(step, f"{step.actor} is not a running phone")
        return actor

    async def _wait_for(self, step: ScenarioStep, predicate, what: str) -> None:
        # retransmission backoff stretches everything when links drop packets
        factor = 4 if self.shim.loss > 0 else 1
        deadline = time.monotonic() + factor * step.timeout_ms / 1000
        while True:
            if predicate():
                return
            if time.monotonic() >= deadline:
                raise StepTimeout(step, what)
            await asyncio.sleep(POLL_S)

    async def execute(self, step: ScenarioStep) -> str:
        verb, args = step.verb, step.args
        if verb == "start":
            await self._start(step.actor)
            return f"{step.actor} started as {args[0]}"
        if verb == "wait":
            await asyncio.sleep(int(args[0]) / 1000)
            return f"waited {args[0]} ms"
        if verb == "kill":
            actor = self.actors.pop(step.actor, None)
            if actor is None:
                raise AssertFailed(step, f"{step.actor} is not running")
            actor.close()
            return f"{step.actor} killed"
        if verb == "partition":
            self.shim.partition(args[0], args[1])
            return f"partitioned {args[0]} <-> {args[1]}"
        if verb == "heal":
            self.shim.heal(*args[:2]) if args else self.shim.heal()
            return "healed " + (" <-> ".join(args) if args else "all links")
        if verb == "loss":
            pct = float(args[0])
            if len(args) >= 3:
                self.shim.set_link(args[1], args[2], loss=pct / 100)
            else:
                self.shim.loss = pct / 100
            return f"loss {pct:g}%"
        if verb == "expect":
            return await self._expect(step)
        if verb == "assert":
            return self._assert(step)
        return self._stimulus(step)

    def _stimulus(self, step: ScenarioStep) -> str:
        phone, verb, args = self.phone(step), step.verb, step.args
        try:
            if verb == "register":
                proxies = [self.addr_of(p) for p in args[2:]]
                phone.register(args[0], args[1], proxies)
            elif verb == "call":
                phone.call(args[0])
            elif verb == "answer":
                phone.answer_call()
            elif verb == "hold":
                phone.hold()
            elif verb == "unhold":
                phone.unhold()
            elif verb == "dtmf":
                for digit in args[0]:
                    phone.send_dtmf(digit)
            elif verb == "hangup":
                phone.hangup()
            elif verb == "transfer":
                phone.transfer_to(args[0])
            elif verb == "forward":
                phone.set_forward(None if args[0] == "off" else args[0])
        except InvalidTransition as exc:
            raise AssertFailed(step, str(exc)) from None
        return str(step)

    async def _expect(self, step: ScenarioStep) -> str:
        phone = self.phone(step)
        wanted = " ".join(step.args)
        found = {}

        def seen() -> bool:
            start = self.cursors.get(step.actor, 0)
            for i in range(start, len(phone.events)):
                if phone.events[i][1].startswith(wanted):
                    found["i"] = i
                    return True
            return False

        await self._wait_for(step, seen, f"{step.actor} {wanted!r}")
        self.cursors[step.actor] = found["i"] + 1
        return f"{step.actor} saw {phone.events[found['i']][1]}"

    # assertions ------------------------------------------------------------

    def _assert(self, step: ScenarioStep) -> str:
        what, rest = step.args[0], list(step.args[1:])
        try:
            check = getattr(self, f"_check_{what}")
        except AttributeError:
            raise AssertFailed(step, f"unknown assertion {what!r}") from None
        return check(step, rest)

    def _check_no_rtp(self, step, rest) -> str:
        n = asserts.rtp_count_at(self.shim, step.actor)
        if n:
            raise AssertFailed(step, f"{n} RTP packets reached {step.actor}")
        return f"no RTP at {step.actor}"

    def _check_rtp(self, step, rest) -> str:
        n = asserts.rtp_count_at(self.shim, step.actor)
        if not n:
            raise AssertFailed(step, f"no RTP reached {step.actor}")
        return f"{n} RTP packets at {step.actor}"

    def _check_rtp_from(self, step, rest) -> str:
        phone = self.phone(step)
        peer = rest[0]
        hosts = {h for h, a in self.shim.hosts.items() if a.split(".")[0] == peer}
        n = sum(c for (h, _), c in phone.rtp_sources.items() if h in hosts)
        if not n:
            raise AssertFailed(step, f"{step.actor} received no RTP from {peer}")
        return f"{step.actor} received {n} RTP packets from {peer}"

    def _check_sequence(self, step, rest) -> str:
        tokens = asserts.sequence_of(self.shim, step.actor)
        if not asserts.assert_sequence(tokens, rest):
            raise AssertFailed(step, f"sequence {' '.join(tokens)} does not match {' '.join(rest)}")
        return f"{step.actor} sequence matches {' '.join(rest)}"

    def _check_tone(self, step, rest) -> str:
        phone = self.phone(step)
        hz, op, limit = float(rest[0]), rest[1], float(rest[2])
        frames = int(rest[3].split("=")[1]) if len(rest) > 3 else 50
        db = asserts.tone_energy(phone.received_audio(frames), hz)
        ok = db >= limit if op == ">=" else db <= limit
        detail = f"{step.actor} energy at {hz:g} Hz is {db:.1f} dB ({op} {limit:g})"
        if not ok:
            raise AssertFailed(step, detail)
        return detail

    def _check_no_leak(self, step, rest) -> str:
        border = [a for a in set(self.shim.hosts.values())
                  if a == step.actor or a.endswith(".ext")]
        internal = [spec.host for spec in self.specs.values() if spec.kind != "trunk"]
        found = asserts.leaked_addresses(self.shim, border, internal)
        if found:
            raise AssertFailed(step, f"internal addresses on the border: {found[:3]}")
        scanned = sum(1 for d in self.shim.log
                      if self.shim.actor(d.src) in border or self.shim.actor(d.dst) in border)
        return f"{scanned} border datagrams carry no internal address"

    def _check_cdr(self, step, rest) -> str:
        path = self.workdir / f"cdr-{step.actor}.csv"
        cdrs = read_cdrs(path) if path.exists() else []
        if not cdrs:
            raise AssertFailed(step, f"{step.actor} wrote no CDR")
        cdr = cdrs[-1]
        if cdr.disposition.value != rest[0]:
            raise AssertFailed(step, f"last CDR is {cdr.disposition.value}, wanted {rest[0]}")
        for opt in rest[1:]:
            m = re.fullmatch(r"duration=(\d+)(?:\+-|±)(\d+)", opt)
            if m:
                want, tol = int(m.group(1)), int(m.group(2))
                if abs(cdr.duration_ms - want) > tol:
                    raise AssertFailed(step, f"duration {cdr.duration_ms} ms not {want}±{tol}")
        return f"last CDR {cdr.disposition.value} duration={cdr.duration_ms} ms"

    def _check_voicemail(self, step, rest) -> str:
        mailbox, want = rest[0], int(rest[1])
        index = self.workdir / "voicemail" / mailbox / "index"
        lines = index.read_text().splitlines() if index.exists() else []
        if len(lines) != want:
            raise AssertFailed(step, f"mailbox {mailbox} holds {len(lines)} messages, wanted {want}")
        return f"mailbox {mailbox} holds {want} messages"

    def _check_state(self, step, rest) -> str:
        phone = self.phone(step)
        if phone.state.call.value != rest[0]:
            raise AssertFailed(step, f"{step.actor} is {phone.state.call.value}, wanted {rest[0]}")
        return f"{step.actor} is {rest[0]}"

    def _check_within(self, step, rest) -> str:
        """``alice assert within REGISTERED ANSWERED 5000``: B follows the latest A in time."""
        phone = self.phone(step)
        first, then, limit_ms = rest[0], rest[1], float(rest[2])
        starts = [t for t, e in phone.events if e.startswith(first)]
        if not starts:
            raise AssertFailed(step, f"{step.actor} never saw {first}")
        t0 = starts[-1]
        after = [t for t, e in phone.events if e.startswith(then) and t >= t0]
        if not after:
            raise AssertFailed(step, f"{step.actor} saw no {then} after {first}")
        gap_ms = (after[0] - t0) * 1000
        detail = f"{then} came {gap_ms:.0f} ms after {first} (limit {limit_ms:g} ms)"
        if gap_ms > limit_ms:
            raise AssertFailed(step, detail)
        return detail

    def _check_ladder(self, step, rest) -> str:
        if self.golden_dir is None:
            raise AssertFailed(step, "no directory to look for golden ladders in")
        path = Path(self.golden_dir) / rest[0]
        actual = self.current_ladder()
        if self.bless:
            write_ladder(path, actual)
            return f"wrote {len(actual)} lines to {path.name}"
        if not path.exists():
            raise AssertFailed(step, f"golden ladder {path.name} is missing")
        golden = read_ladder(path)
        if self.shim.loss > 0:
            actual, golden = without_provisionals(actual), without_provisionals(golden)
        diff = compare(actual, golden)
        if diff:
            raise AssertFailed(step, "ladder differs from golden:\n" + "\n".join(diff))
        return f"ladder matches {path.name} ({len(golden)} messages)"

    def current_ladder(self) -> list[str]:
        return ladder(self.shim.log, self.shim.actor)

    # driver ----------------------------------------------------------------

    async def run(self) -> Report:
        report = Report(self.scenario.name, self.seed, self.shim.loss)
        started = time.monotonic()
        failed = False
        try:
            for number, step in enumerate(self.scenario.steps, 1):
                at = time.monotonic() - started
                if failed:
                    report.results.append(StepResult(number, step, False,
                                                     f"{step} (not run after earlier failure)", at))
                    continue
                try:
                    detail = await self.execute(step)
                    report.results.append(StepResult(number, step, True, detail, at))
                except (StepTimeout, AssertFailed, asserts.CaptureMissing) as exc:
                    failed = True
                    report.results.append(StepResult(number, step, False, f"{step}: {exc}", at))
                except Exception as exc:  # a crashed step is a failed step, not a crashed run
                    log.exception("step %d crashed", number)
                    failed = True
                    report.results.append(StepResult(
                        number, step, False, f"{step}: {type(exc).__name__}: {exc}", at))
            await asyncio.sleep(0.05)
            report.ladder = self.current_ladder()
            self._count_calls(report)
        finally:
            self.shutdown()
        report.elapsed_s = time.monotonic() - started
        return report

    def _count_calls(self, report: Report) -> None:
        for actor in self.actors.values():
            if isinstance(actor, Phone):
                for _, text in actor.events:
                    if text.startswith("CALLING"):
                        report.calls_attempted += 1
                    elif text == "ANSWERED":
                        report.calls_completed += 1

    def shutdown(self) -> None:
        for actor in self.actors.values():
            try:
                actor.close()
            except Exception:  # best effort during teardown
                log.exception("closing %r", actor)
        self.actors.clear()

    def save_capture(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_ladder(directory / f"{self.scenario.name}.ladder", self.current_ladder())
        with open(directory / f"{self.scenario.name}.capture", "w") as fh:
            for d in self.shim.log:
                kind = "sip" if d.is_sip else "rtp" if d.is_rtp else "udp"
                fate = "ok" if d.delivered else "drop"
                fh.write(f"{d.t:.4f} {self.shim.actor(d.src)} {d.src[0]}:{d.src[1]} -> "
                         f"{self.shim.actor(d.dst)} {d.dst[0]}:{d.dst[1]} {kind} {len(d.data)} {fate}\n")
                if d.is_sip:
                    fh.write(d.data.decode("utf-8", "replace").replace("\r\n", "\n  "))
                    fh.write("\n")

    def cleanup(self) -> None:
        if self._own_workdir:
            shutil.rmtree(self.workdir, ignore_errors=True)


def run_scenario(scenario: Scenario, shim: NetShim | None = None, seed: int = 0, *,
                 capture_dir: Path | None = None, bless: bool = False, **kw) -> Report:
    runner = Runner(scenario, shim, seed=seed, bless=bless, **kw)
    try:
        report = asyncio.run(runner.run())
        if capture_dir is not None:
            runner.save_capture(capture_dir)
        return report
    finally:
        runner.cleanup()
