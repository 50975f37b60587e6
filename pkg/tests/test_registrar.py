from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipts.registrar import (
    Binding,
    JournalCorrupt,
    LocationStore,
    MalformedUserFile,
    NonceStore,
    Privilege,
    Registrar,
    StaleNonce,
    Subscriber,
    authenticate,
    format_users,
    load_users,
    parse_users,
    verify_digest,
)
from ipts.sip import SipMethod, SipRequest, SipUri, new_branch
from ipts.sip.digest import authorization_header, ha1, parse_digest
from ipts.sip.message import HeaderField

import oracles

T0 = 1_700_000_000.0
USERS = f"""# test subscribers
2001,Alice,{ha1('2001', 'pbx', 'pw1')},internal
2002,Bob,{ha1('2002', 'pbx', 'pw2')},external

2003,Carol,{ha1('2003', 'pbx', 'pw3')},internal
"""


def aor(ext: str) -> SipUri:
    return SipUri("pbx", ext)


def contact(host: str, port: int = 5060, ext: str = "2001") -> SipUri:
    return SipUri(host, ext, port)


def register(ext: str, contacts=("<sip:2001@10.0.0.5>",), expires: str | None = "3600",
             auth: str | None = None, cseq: int = 1) -> SipRequest:
    headers = [
        HeaderField("Via", f"SIP/2.0/UDP 10.0.0.5;branch={new_branch()}"),
        HeaderField("Max-Forwards", "70"),
        HeaderField("From", f"<sip:{ext}@pbx>;tag=r1"),
        HeaderField("To", f"<sip:{ext}@pbx>"),
        HeaderField("Call-ID", "reg@10.0.0.5"),
        HeaderField("CSeq", f"{cseq} REGISTER"),
    ]
    headers += [HeaderField("Contact", c) for c in contacts]
    if expires is not None:
        headers.append(HeaderField("Expires", expires))
    if auth is not None:
        headers.append(HeaderField("Authorization", auth))
    return SipRequest(SipMethod.REGISTER, SipUri("pbx"), tuple(headers))


def nonce_of(resp) -> str:
    return parse_digest(resp.header("WWW-Authenticate"))["nonce"]


# --- users file ----------------------------------------------------------------

def test_parse_users_file():
    subs = parse_users(USERS)
    assert sorted(subs) == ["2001", "2002", "2003"]
    assert subs["2002"].privilege == Privilege.EXTERNAL and subs["2002"].can_call_external
    assert not subs["2001"].can_call_external
    assert parse_users(format_users(subs.values())) == subs


@pytest.mark.parametrize("line,line_no", [
    ("2001,Alice,abc,internal", 2),
    ("x01,Alice," + "0" * 32 + ",internal", 2),
    ("2001,Alice," + "0" * 32 + ",admin", 2),
    ("2001,Alice," + "0" * 32, 2),
    ("2001,Dup," + "0" * 32 + ",internal", 2),
])
def test_malformed_user_lines_report_line_number(line, line_no):
    text = "2001,Alice," + "1" * 32 + ",internal\n" + line + "\n"
    with pytest.raises(MalformedUserFile) as err:
        parse_users(text)
    assert err.value.line_no == line_no


def test_extension_may_not_start_with_external_prefix():
    with pytest.raises(MalformedUserFile):
        parse_users("9001,X," + "0" * 32 + ",internal\n", external_prefix="9")


def test_empty_users_file_answers_404(tmp_path):
    path = tmp_path / "users"
    path.write_text("")
    store = load_users(path)
    assert store.subscribers == {}
    resp = Registrar(store, "pbx").handle_register(register("2001"), T0)
    assert resp.code == 404


# --- bindings ------------------------------------------------------------------

def fresh_store(tmp_path=None) -> LocationStore:
    journal = tmp_path / "journal" if tmp_path else None
    return LocationStore(parse_users(USERS), journal_path=journal)


def test_two_devices_give_two_bindings():
    store = fresh_store()
    store.add_binding(Binding(aor("2001"), contact("10.0.0.5"), T0 + 60, T0))
    store.add_binding(Binding(aor("2001"), contact("10.0.0.6"), T0 + 60, T0))
    assert len(store.lookup(aor("2001"), T0)) == 2
    assert store.lookup("sip:2001@PBX", T0)  # host compared case-insensitively
    assert store.lookup(aor("2001"), T0 + 61) == []
    assert store.lookup(aor("9999"), T0) == []


def test_expire_bindings_counts():
    store = fresh_store()
    store.add_binding(Binding(aor("2001"), contact("10.0.0.5"), T0 + 60, T0))
    store.add_binding(Binding(aor("2002"), contact("10.0.0.7", ext="2002"), T0 + 600, T0))
    assert store.expire_bindings(T0) == 0
    assert store.expire_bindings(T0 + 100) == 1
    assert [b.aor.user for b in store.all_bindings(T0 + 100)] == ["2002"]


def test_binding_needs_subscriber():
    with pytest.raises(KeyError):
        fresh_store().add_binding(Binding(aor("7777"), contact("1.1.1.1"), T0 + 60, T0))


ops = st.lists(st.tuples(
    st.sampled_from(["ADD", "DEL"]),
    st.sampled_from(["2001", "2002", "2003"]),
    st.sampled_from(["10.0.0.5", "10.0.0.6", "10.0.0.7"]),
    st.integers(1, 600),
), max_size=30)


@settings(max_examples=60, deadline=None)
@given(ops, st.integers(0, 700))
def test_journal_reload_gives_identical_lookups(tmp_path_factory, script, probe):
    tmp = tmp_path_factory.mktemp("j")
    store = fresh_store(tmp)
    for op, ext, host, ttl in script:
        b = Binding(aor(ext), contact(host, ext=ext), T0 + ttl, T0)
        if op == "ADD":
            store.add_binding(b)
        else:
            store.remove_binding(b.aor, b.contact, T0)
    standby = LocationStore(parse_users(USERS), journal_path=tmp / "journal")
    for ext in ("2001", "2002", "2003"):
        assert set(standby.lookup(aor(ext), T0 + probe)) == set(store.lookup(aor(ext), T0 + probe))
    # replaying the journal a second time changes nothing
    lines = (tmp / "journal").read_bytes().splitlines(keepends=True)
    twice = LocationStore(parse_users(USERS))
    for _ in range(2):
        for offset, raw in enumerate(lines):
            twice._apply_journal_line(raw, offset)
    once = LocationStore(parse_users(USERS), journal_path=tmp / "journal")
    assert twice.bindings == once.bindings


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1000), st.integers(1, 500)), min_size=1, max_size=20),
       st.lists(st.floats(0, 2000), min_size=1, max_size=10))
def test_lookup_never_returns_expired(regs, sweeps):
    store = fresh_store()
    for i, (start, ttl) in enumerate(regs):
        store.add_binding(Binding(aor("2001"), contact(f"10.0.1.{i}"), T0 + start + ttl, T0 + start))
    for t in sorted(sweeps):
        assert all(b.expires_at > T0 + t for b in store.lookup(aor("2001"), T0 + t))


def test_peer_appends_are_picked_up(tmp_path):
    a = fresh_store(tmp_path)
    b = LocationStore(parse_users(USERS), journal_path=tmp_path / "journal")
    a.add_binding(Binding(aor("2001"), contact("10.0.0.5"), T0 + 60, T0))
    assert len(b.lookup(aor("2001"), T0)) == 1


def test_torn_journal_tail_waits_for_completion(tmp_path):
    store = fresh_store(tmp_path)
    with open(tmp_path / "journal", "a") as fh:
        fh.write("ADD sip:2001@pbx sip:2001@10.0.0.5 1700000060")
    assert store.lookup(aor("2001"), T0) == []
    with open(tmp_path / "journal", "a") as fh:
        fh.write(".000\n")
    assert len(store.lookup(aor("2001"), T0)) == 1


def test_corrupt_journal_reports_offset(tmp_path):
    journal = tmp_path / "journal"
    good = "ADD sip:2001@pbx sip:2001@10.0.0.5 1700000060.000\n"
    journal.write_text(good + "BOGUS record\n")
    with pytest.raises(JournalCorrupt) as err:
        LocationStore(parse_users(USERS), journal_path=journal)
    assert err.value.offset == len(good)


# --- authentication --------------------------------------------------------------

def signed_register(nonce: str, password: str = "pw1", ext: str = "2001") -> SipRequest:
    return register(ext, auth=authorization_header(ext, "pbx", password, nonce,
                                                   "REGISTER", "sip:pbx"))


def test_correct_digest_authenticates():
    nonces = NonceStore()
    nonce = nonces.issue(T0)
    sub = parse_users(USERS)["2001"]
    req = signed_register(nonce)
    expected = oracles.digest("2001", "pbx", "pw1", nonce, "REGISTER", "sip:pbx")
    assert parse_digest(req.header("Authorization"))["response"] == expected
    assert authenticate(req, sub, nonces, T0 + 1)


def test_reused_nonce_is_stale():
    nonces = NonceStore()
    nonce = nonces.issue(T0)
    sub = parse_users(USERS)["2001"]
    assert authenticate(signed_register(nonce), sub, nonces, T0)
    with pytest.raises(StaleNonce):
        authenticate(signed_register(nonce), sub, nonces, T0)


def test_expired_nonce_is_stale():
    nonces = NonceStore(ttl=60)
    nonce = nonces.issue(T0)
    with pytest.raises(StaleNonce):
        authenticate(signed_register(nonce), parse_users(USERS)["2001"], nonces, T0 + 61)


def test_wrong_password_fails():
    nonces = NonceStore()
    nonce = nonces.issue(T0)
    assert not authenticate(signed_register(nonce, "nope"), parse_users(USERS)["2001"], nonces, T0)


@given(st.text(alphabet="abcdef0123456789", min_size=4, max_size=16),
       st.sampled_from(["pw1", "wrong"]))
def test_digest_verdict_is_deterministic(nonce, password):
    sub = parse_users(USERS)["2001"]
    req = signed_register(nonce, password)
    first = verify_digest(req, sub.credential, nonce)
    assert all(verify_digest(req, sub.credential, nonce) == first for _ in range(3))
    assert first == (password == "pw1")


# --- REGISTER handling -----------------------------------------------------------

def test_register_challenge_then_success():
    reg = Registrar(fresh_store(), "pbx")
    first = reg.handle_register(register("2001"), T0)
    assert first.code == 401
    ok = reg.handle_register(signed_register(nonce_of(first)), T0)
    assert ok.code == 200
    assert "expires=3600" in ok.header("Contact")
    assert len(reg.store.lookup(aor("2001"), T0)) == 1


def test_wrong_password_gets_a_fresh_challenge():
    reg = Registrar(fresh_store(), "pbx")
    nonce = nonce_of(reg.handle_register(register("2001"), T0))
    again = reg.handle_register(signed_register(nonce, "bad"), T0)
    assert again.code == 401 and nonce_of(again) != nonce


def test_replayed_register_is_told_stale():
    reg = Registrar(fresh_store(), "pbx")
    nonce = nonce_of(reg.handle_register(register("2001"), T0))
    reg.handle_register(signed_register(nonce), T0)
    replay = reg.handle_register(signed_register(nonce), T0)
    assert replay.code == 401 and "stale=true" in replay.header("WWW-Authenticate")


def _authed(reg: Registrar, **kw) -> SipRequest:
    nonce = nonce_of(reg.handle_register(register("2001"), T0))
    base = register("2001", **kw)
    return base.with_header("Authorization", authorization_header(
        "2001", "pbx", "pw1", nonce, "REGISTER", "sip:pbx"))


def test_too_short_expiry_is_423():
    reg = Registrar(fresh_store(), "pbx")
    resp = reg.handle_register(_authed(reg, expires="10"), T0)
    assert resp.code == 423 and resp.header("Min-Expires") == "60"


def test_unregister_with_wildcard():
    reg = Registrar(fresh_store(), "pbx")
    reg.handle_register(_authed(reg), T0)
    assert reg.store.lookup(aor("2001"), T0)
    resp = reg.handle_register(_authed(reg, contacts=("*",), expires="0"), T0)
    assert resp.code == 200 and reg.store.lookup(aor("2001"), T0) == []


def test_unknown_extension_is_404():
    assert Registrar(fresh_store(), "pbx").handle_register(register("4242"), T0).code == 404


def test_subscriber_value_semantics():
    s = Subscriber("2001", "Alice", "0" * 32)
    assert s.privilege == Privilege.INTERNAL
    assert Binding(aor("2001"), contact("1.1.1.1"), T0 + 30, T0).remaining(T0) == 30
