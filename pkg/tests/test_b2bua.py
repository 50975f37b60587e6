from __future__ import annotations

import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ipts.b2bua.config import IvrMenu, load_b2bua_config, parse_digit_map
from ipts.b2bua.dialplan import (
    Action,
    BadDialplan,
    DialplanRule,
    NoMatch,
    default_dialplan,
    match_dialplan,
    parse_dialplan,
)
from ipts.b2bua.prompts import ensure_prompts
from ipts.b2bua.topology import leaks, rewrite_topology
from ipts.media import read_wav
from ipts.patterns import BadPattern, compile_pattern, matches
from ipts.proxy.config import ConfigError
from ipts.sip import audio_offer, parse_sdp, serialize_sdp

RULES = default_dialplan()


@pytest.mark.parametrize("digits,action", [
    ("93525550123", Action.BRIDGE),
    ("91", Action.BRIDGE),
    ("3000", Action.CONFERENCE),
    ("3099", Action.CONFERENCE),
    ("4000", Action.VOICEMAIL),
    ("5000", Action.IVR),
    ("7000", Action.MOH),
])
def test_default_dialplan(digits, action):
    assert match_dialplan(digits, RULES).action is action


@pytest.mark.parametrize("digits", ["", "9", "310", "30000", "2001"])
def test_no_match(digits):
    with pytest.raises(NoMatch):
        match_dialplan(digits, RULES)


def test_literal_beats_wildcard_at_same_priority():
    rules = parse_dialplan("5,4XXX,bridge,trunk0\n5,4000,voicemail\n")
    assert match_dialplan("4000", rules).action is Action.VOICEMAIL
    assert match_dialplan("4001", rules).action is Action.BRIDGE


def test_lower_priority_number_wins_over_literal():
    rules = parse_dialplan("9,4000,voicemail\n1,4XXX,moh\n")
    assert match_dialplan("4000", rules).action is Action.MOH


def test_dialplan_parsing_ignores_comments():
    rules = parse_dialplan("# header\n\n10,9X.,bridge,trunk1  # outside\n")
    assert rules == [DialplanRule(10, "9X.", Action.BRIDGE, "trunk1")]


@pytest.mark.parametrize("text,line", [
    ("10,9X.,bridge\n20,30XX\n", 2),
    ("x,9X.,bridge\n", 1),
    ("10,9X.,dance\n", 1),
    ("10,9.X,bridge\n", 1),
    ("10,9Q,bridge\n", 1),
])
def test_bad_dialplan_reports_line(text, line):
    with pytest.raises(BadDialplan) as info:
        parse_dialplan(text)
    assert info.value.line_no == line


# --- patterns ---------------------------------------------------------------

def test_pattern_semantics():
    assert matches("9X.", "91") and matches("9X.", "9123456")
    assert not matches("9X.", "9")
    assert matches("30XX", "3042") and not matches("30XX", "304")
    assert matches(".", "7") and not matches(".", "")
    for bad in ("", "1.2", "9Y"):
        with pytest.raises(BadPattern):
            compile_pattern(bad)


def _pattern_oracle(pattern, digits):
    # positional comparison; a trailing dot admits any digit tail
    if pattern == ".":
        return len(digits) >= 1
    if pattern.endswith("."):
        pattern = pattern[:-1]
        if len(digits) < len(pattern):
            return False
        digits = digits[:len(pattern)]
    if len(pattern) != len(digits):
        return False
    return all(p == d or p in "Xx" for p, d in zip(pattern, digits))


@given(st.text(alphabet="0123X", max_size=5), st.booleans(),
       st.text(alphabet="0123", max_size=8))
def test_pattern_matches_oracle(body, repeat, digits):
    pattern = body + ("." if repeat else "")
    if not pattern:
        return
    assert matches(pattern, digits) == _pattern_oracle(pattern, digits)


# --- topology hiding ----------------------------------------------------------

INSIDE = audio_offer("10.1.2.3", 40000)


@given(st.ip_addresses(v=4).map(str),
       st.integers(1, 30000).map(lambda p: p * 2))
def test_rewrite_is_idempotent(host, port):
    once = rewrite_topology(INSIDE, (host, port))
    assert rewrite_topology(once, (host, port)) == once
    assert once.media_addr == (host, port)
    assert once.attributes == INSIDE.attributes


def test_rewritten_sdp_leaks_nothing():
    out = serialize_sdp(rewrite_topology(INSIDE, ("198.51.100.7", 30000)))
    assert leaks(out, ["10.1.2.3"]) == []
    assert parse_sdp(out).origin_address == "198.51.100.7"


def test_leak_detection_matches_whole_addresses_only():
    data = b"c=IN IP4 10.1.2.30\r\no=- 0 0 IN IP4 110.1.2.3\r\n"
    assert leaks(data, ["10.1.2.3"]) == []
    assert leaks(b"Via: SIP/2.0/UDP 10.1.2.3:5060", ["10.1.2.3", "10.9.9.9"]) == ["10.1.2.3"]


# --- configuration ------------------------------------------------------------

def test_b2bua_config_from_ini(tmp_path):
    (tmp_path / "plan.txt").write_text("10,8X.,bridge,carrier\n")
    (tmp_path / "b.ini").write_text(
        "[server]\nhost = 127.0.0.20\nport = 5080\npublic_host = 127.0.0.30\n"
        "proxy = 127.0.0.10:5060\nvmdir = vm\n"
        "[trunk:carrier]\nprovider = 127.0.0.40:5060\nusername = acct\npassword = pw\n"
        "[ivr]\nmap = 1:2001, 2:2002\ntimeout_s = 3\n"
        "[dialplan]\nfile = plan.txt\n")
    cfg = load_b2bua_config(tmp_path / "b.ini")
    assert cfg.proxy_addr == ("127.0.0.10", 5060)
    assert cfg.vmdir == tmp_path / "vm"
    assert cfg.trunks["carrier"].credentials("x") == ("acct", "pw")
    assert cfg.ivr.digit_map == {"1": "2001", "2": "2002"}
    assert match_dialplan("8123", cfg.rules).arg == "carrier"


def test_b2bua_config_errors(tmp_path):
    (tmp_path / "b.ini").write_text("[trunk]\nusername = x\n")
    with pytest.raises(ConfigError):
        load_b2bua_config(tmp_path / "b.ini")
    with pytest.raises(ConfigError):
        parse_digit_map("1=2001")
    with pytest.raises(ConfigError):
        IvrMenu(digit_map={"12": "2001"})


def test_prompts_are_generated_once(tmp_path):
    paths = ensure_prompts(tmp_path)
    stamps = {p: p.stat().st_mtime_ns for p in paths.values()}
    assert ensure_prompts(tmp_path) == paths
    assert {p: p.stat().st_mtime_ns for p in paths.values()} == stamps
    for path in paths.values():
        samples = read_wav(path)
        assert len(samples) > 0 and re.fullmatch(r"\w+\.wav", path.name)
