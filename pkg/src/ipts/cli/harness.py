"""``ipts-harness``: run scenario files and print per-step verdicts."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

from ..harness import SCENARIO_DIR, NetShim, ScenarioError, load_scenario, run_scenario
from .common import Parser, add_logging, setup_logging


def _resolve(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    bundled = SCENARIO_DIR / f"{name}.scn"
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"no scenario file {name!r} (and no bundled scenario of that name)")


def main(argv=None) -> int:
    parser = Parser(prog="ipts-harness", description="scenario-driven integration tests")
    add_logging(parser)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("scenario", help="scenario file, or the name of a bundled scenario")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--loss", type=float, default=0.0,
                     help="UDP loss on every link, as a fraction (0.2) or percent (20)")
    run.add_argument("--delay-ms", type=int, default=0, help="one-way delay on every link")
    run.add_argument("--capture", type=Path, default=None,
                     help="write the ladder and a datagram log into this directory")
    run.add_argument("--bless", action="store_true",
                     help="record ladders as the new golden files instead of comparing")
    run.add_argument("--quiet", action="store_true", help="omit the ladder from the report")
    sub.add_parser("list", help="list bundled scenarios")
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    if args.command == "list":
        for path in sorted(SCENARIO_DIR.glob("*.scn")):
            first = path.read_text().splitlines()[0].lstrip("# ")
            print(f"{path.stem:12} {first}")
        return 0
    loss = args.loss / 100 if args.loss > 1 else args.loss
    if not 0 <= loss <= 1:
        print("ipts-harness: --loss must be within 0-100%", file=sys.stderr)
        return 1
    try:
        scenario = load_scenario(_resolve(args.scenario))
    except ScenarioError as exc:
        print(f"ipts-harness: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ipts-harness: {exc}", file=sys.stderr)
        return 2
    shim = NetShim(loss=loss, delay=args.delay_ms / 1000)
    report = run_scenario(scenario, shim, seed=args.seed, capture_dir=args.capture,
                          bless=args.bless)
    print(report.text(with_ladder=not args.quiet))
    logging.shutdown()
    return 0 if report.passed else 1
