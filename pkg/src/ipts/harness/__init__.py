"""Scenario-driven integration testing on loopback."""

from pathlib import Path

from .asserts import (
    CaptureMissing,
    assert_no_rtp_at,
    assert_sequence,
    leaked_addresses,
    sequence_of,
    tone_energy,
)
from .ladder import ladder
from .runner import AssertFailed, Report, Runner, StepResult, StepTimeout, run_scenario
from .scenario import Scenario, ScenarioError, ScenarioStep, load_scenario, parse_scenario
from .shim import Datagram, NetShim
from .trunk import TrunkSim

SCENARIO_DIR = Path(__file__).parent / "scenarios"

__all__ = [
    "AssertFailed",
    "CaptureMissing",
    "Datagram",
    "NetShim",
    "Report",
    "Runner",
    "SCENARIO_DIR",
    "Scenario",
    "ScenarioError",
    "ScenarioStep",
    "StepResult",
    "StepTimeout",
    "TrunkSim",
    "assert_no_rtp_at",
    "assert_sequence",
    "ladder",
    "leaked_addresses",
    "load_scenario",
    "parse_scenario",
    "run_scenario",
    "sequence_of",
    "tone_energy",
]
