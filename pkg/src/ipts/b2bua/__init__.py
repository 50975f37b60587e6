from .config import B2buaConfig, IvrMenu, TrunkProfile, load_b2bua_config, parse_digit_map
from .dialplan import (
    Action,
    BadDialplan,
    DialplanRule,
    NoMatch,
    default_dialplan,
    load_dialplan,
    match_dialplan,
    parse_dialplan,
)
from .prompts import ensure_prompts
from .server import B2bua, BridgedCall, CallLeg, CallState, DiskFull
from .topology import leaks, rewrite_topology

__all__ = [
    "Action",
    "B2bua",
    "B2buaConfig",
    "BadDialplan",
    "BridgedCall",
    "CallLeg",
    "CallState",
    "DialplanRule",
    "DiskFull",
    "IvrMenu",
    "NoMatch",
    "TrunkProfile",
    "default_dialplan",
    "ensure_prompts",
    "leaks",
    "load_b2bua_config",
    "load_dialplan",
    "match_dialplan",
    "parse_dialplan",
    "parse_digit_map",
    "rewrite_topology",
]
