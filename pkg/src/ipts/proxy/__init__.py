from .cdr import CDR_COLUMNS, Cdr, CdrWriter, Disposition, account, disposition_for, read_cdrs
from .config import ConfigError, ProxyConfig, load_proxy_config, parse_addr
from .routing import (
    External,
    Feature,
    FeatureKind,
    Internal,
    Reject,
    RoutingDecision,
    best_response,
    classify_digits,
    route,
    sanity_check,
)
from .server import ProxyServer

__all__ = [
    "CDR_COLUMNS",
    "Cdr",
    "CdrWriter",
    "ConfigError",
    "Disposition",
    "External",
    "Feature",
    "FeatureKind",
    "Internal",
    "ProxyConfig",
    "ProxyServer",
    "Reject",
    "RoutingDecision",
    "account",
    "best_response",
    "classify_digits",
    "disposition_for",
    "load_proxy_config",
    "parse_addr",
    "read_cdrs",
    "route",
    "sanity_check",
]
