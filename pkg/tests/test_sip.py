from __future__ import annotations

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipts.sip import (
    MANDATORY_HEADERS,
    BodyLengthMismatch,
    Direction,
    MalformedSdp,
    MalformedStartLine,
    MalformedUri,
    MissingMandatoryHeader,
    ParseError,
    SdpBody,
    SipMethod,
    SipRequest,
    SipResponse,
    StatusClass,
    StatusCode,
    StatusOutOfRange,
    audio_offer,
    build_response,
    classify_status,
    parse_message,
    parse_name_addr,
    parse_sdp,
    parse_uri,
    parse_via,
    serialize_message,
    serialize_sdp,
    validate,
)
from ipts.sip.digest import authorization_header, digest_response, ha1, parse_digest

import oracles
from strategies import requests, responses, token, uris

CORPUS = oracles.corpus()


def test_corpus_is_large_enough():
    assert len(CORPUS) >= 50


@pytest.mark.parametrize("name,raw", CORPUS, ids=[n for n, _ in CORPUS])
def test_corpus_matches_oracle(name, raw):
    msg = parse_message(raw)
    ref = oracles.oracle_parse(raw)
    if ref["kind"] == "request":
        assert isinstance(msg, SipRequest)
        assert msg.method.value == ref["method"]
        assert str(msg.uri) == ref["uri"]
    else:
        assert isinstance(msg, SipResponse)
        assert (msg.code, msg.status.reason) == (ref["code"], ref["reason"])
    assert [(h.name, h.value) for h in msg.headers] == ref["headers"]
    assert msg.body == ref["body"]


@pytest.mark.parametrize("name,raw", CORPUS, ids=[n for n, _ in CORPUS])
def test_corpus_round_trip(name, raw):
    msg = parse_message(raw)
    again = parse_message(serialize_message(msg))
    assert again == msg
    # a second serialization is byte-stable
    assert serialize_message(again) == serialize_message(msg)


def test_compact_and_long_forms_parse_alike():
    compact = oracles.sample("invite-compact")
    msg = parse_message(compact)
    assert msg.call_id == "compact-1@10.0.0.5"
    assert msg.contact.uri.user == "2001"
    assert msg.header("content-type") == "application/sdp"


def test_comma_separated_via_is_split_in_order():
    msg = parse_message(oracles.sample("invite-comma-via"))
    assert [v.branch for v in msg.vias] == ["z9hG4bK-p1", "z9hG4bK-ua"]


def test_extension_method_is_kept_verbatim():
    msg = parse_message(oracles.sample("info-extension-method"))
    assert msg.method.value == "INFO" and msg.method.is_extension
    assert not SipMethod.INVITE.is_extension


def test_method_token_is_case_sensitive():
    lower = SipMethod("invite")
    assert lower != SipMethod.INVITE and lower.is_extension


def test_binary_body_survives():
    msg = parse_message(oracles.sample("register-binary-safe"))
    assert msg.body == bytes(range(256))


def test_malformed_inputs_raise_typed_errors():
    with pytest.raises(MalformedStartLine):
        parse_message(b"HELLO\r\n\r\n")
    with pytest.raises(MalformedStartLine):
        parse_message(b"SIP/2.0 700 Nope\r\nCall-ID: x\r\n\r\n")
    with pytest.raises(BodyLengthMismatch):
        parse_message(b"OPTIONS sip:a SIP/2.0\r\nContent-Length: 10\r\n\r\nshort")
    with pytest.raises(ParseError):
        parse_message(b"OPTIONS sip:a SIP/2.0\r\nno colon here\r\n\r\n")
    with pytest.raises(MissingMandatoryHeader):
        parse_message(b"OPTIONS sip:a SIP/2.0\r\nCall-ID: x\r\n\r\n", strict=True)


def test_validate_rejects_cseq_method_mismatch():
    msg = parse_message(oracles.sample("invite-sdp"))
    bad = msg.with_header("CSeq", "1 BYE")
    with pytest.raises(ParseError):
        validate(bad)


# --- status classes ----------------------------------------------------------

def test_all_600_codes_classify_like_the_table():
    for code in range(100, 700):
        expected = oracles.status_class_name(code)
        got = classify_status(code)
        assert got.name.replace("_", " ").title() == expected
        assert got == StatusClass(code // 100)
        assert StatusCode(code).status_class == got


@pytest.mark.parametrize("code", [-1, 0, 99, 700, 1000])
def test_out_of_range_status(code):
    with pytest.raises(StatusOutOfRange):
        classify_status(code)


@given(st.integers(100, 699), st.text(alphabet=st.characters(blacklist_categories=("Cc", "Cs")),
                                      min_size=1, max_size=20).map(str.strip).filter(bool))
def test_reason_phrase_never_changes_class(code, reason):
    assert StatusCode(code, reason).status_class == StatusCode(code).status_class


# --- generated round trips ---------------------------------------------------


@settings(max_examples=200)
@given(st.one_of(requests(), responses()))
def test_generated_messages_round_trip(msg):
    assert parse_message(serialize_message(msg)) == msg


@given(uris)
def test_uri_round_trip(uri):
    again = parse_uri(str(uri))
    assert again == uri
    assert again.host


def test_uri_rejects_bad_input():
    for bad in ["", "sip:", "tel:+123", "sip:user@", "sip:@host", "sip:host:99999",
                "sip:a@b?subject=x"]:
        with pytest.raises(MalformedUri):
            parse_uri(bad)


def test_name_addr_forms():
    na = parse_name_addr('"Smith, John" <sip:2001@pbx>;tag=abc')
    assert (na.display, na.uri.user, na.tag) == ("Smith, John", "2001", "abc")
    bare = parse_name_addr("sip:2002@pbx;tag=x")
    assert bare.uri.params == () and bare.tag == "x"
    assert parse_name_addr(str(na)) == na


def test_via_response_address_prefers_received_and_rport():
    via = parse_via("SIP/2.0/UDP 10.0.0.5:5062;branch=z9hG4bKx;received=1.2.3.4;rport=7000")
    assert via.response_addr == ("1.2.3.4", 7000)
    assert parse_via(str(via)) == via


# --- emitted messages ----------------------------------------------------------

@given(requests(), st.integers(100, 699))
def test_responses_we_build_carry_the_request_vias(req, code):
    resp = build_response(req, code)
    assert resp.header_values("Via") == req.header_values("Via")
    for name in MANDATORY_HEADERS[:-1]:
        assert resp.has_header(name)
    if code >= 200:
        assert resp.to_tag is not None


def test_build_response_keeps_existing_to_tag():
    raw = oracles.sample("bye")
    req = parse_message(raw)
    resp = build_response(req, 200)
    assert resp.to_tag == req.to_tag


# --- SDP -----------------------------------------------------------------------

def test_sdp_from_corpus_parses():
    msg = parse_message(oracles.sample("invite-sdp"))
    sdp = parse_sdp(msg.body)
    assert sdp.media_addr == ("10.0.0.5", 30000)
    assert sdp.payload_types == (0, 101)
    assert sdp.direction == Direction.SENDRECV
    assert serialize_sdp(sdp) == msg.body


def test_sdp_hold_signals():
    held = parse_sdp(parse_message(oracles.sample("invite-hold-sendonly")).body)
    zero = parse_sdp(parse_message(oracles.sample("invite-hold-zero-addr")).body)
    assert held.is_hold and zero.is_hold
    assert not audio_offer("10.0.0.1", 4000).is_hold


_attr = st.text(alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E),
                min_size=1, max_size=25).filter(
    lambda a: a not in {d.value for d in Direction})


@given(st.lists(_attr, max_size=6))
def test_unknown_sdp_attributes_pass_through_byte_identical(attrs):
    base = serialize_sdp(audio_offer("192.168.1.10", 40000)).decode()
    head, _, direction = base.rstrip("\r\n").rpartition("\r\n")
    text = head + "\r\n" + "".join(f"a={a}\r\n" for a in attrs) + direction + "\r\n"
    data = text.encode()
    assert serialize_sdp(parse_sdp(data)) == data


@given(st.integers(1, 32767).map(lambda p: p * 2), st.sampled_from(list(Direction)))
def test_sdp_round_trip(port, direction):
    sdp = audio_offer("10.1.2.3", port, direction=direction, session_id=7, version=3)
    again = parse_sdp(serialize_sdp(sdp))
    assert again.origin_address == "10.1.2.3"
    assert replace(again, origin_address=None) == sdp


def test_sdp_invariants():
    with pytest.raises(MalformedSdp):
        SdpBody("10.0.0.1", 4001)
    with pytest.raises(MalformedSdp):
        SdpBody("10.0.0.1", 4000, payload_types=())
    with pytest.raises(MalformedSdp):
        SdpBody("not-an-ip", 4000)
    SdpBody("10.0.0.1", 0, direction=Direction.INACTIVE)  # inactive may use port 0
    with pytest.raises(MalformedSdp):
        parse_sdp(b"v=0\r\nc=IN IP4 1.2.3.4\r\n")


# --- digest ----------------------------------------------------------------------

@given(token, token, token, token, uris)
def test_digest_matches_independent_computation(user, realm, password, nonce, uri):
    credential = ha1(user, realm, password)
    got = digest_response(credential, nonce, "REGISTER", str(uri))
    assert got == oracles.digest(user, realm, password, nonce, "REGISTER", str(uri))


def test_authorization_header_parses_back():
    value = authorization_header("2001", "pbx", "pw", "n0nce", "REGISTER", "sip:pbx")
    params = parse_digest(value)
    assert params["username"] == "2001" and params["nonce"] == "n0nce"
    assert params["uri"] == "sip:pbx"
    assert params["response"] == oracles.digest("2001", "pbx", "pw", "n0nce", "REGISTER", "sip:pbx")
