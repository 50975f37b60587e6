"""Hypothesis strategies for SIP messages, shared by the unit and acceptance suites."""

from __future__ import annotations

from hypothesis import strategies as st

from ipts.sip import HeaderField, SipMethod, SipRequest, SipUri, build_response, new_branch

token = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789-", min_size=1, max_size=10)
_host = st.one_of(
    st.tuples(*[st.integers(0, 255)] * 4).map(lambda t: ".".join(map(str, t))),
    st.lists(token.filter(lambda s: not s.startswith("-")), min_size=1, max_size=3)
    .map(".".join),
)
_param_name = st.text(alphabet="abcdefghijklmnopqrstuvwxyz", min_size=1, max_size=8)
_params = st.lists(st.tuples(_param_name, st.one_of(st.none(), token)), max_size=3).map(tuple)
uris = st.builds(
    SipUri,
    host=_host,
    user=st.one_of(st.none(), st.text(alphabet="0123456789*#", min_size=1, max_size=12)),
    port=st.integers(1, 65535),
    params=_params,
)
# header values: printable, no CR/LF, no edge whitespace, no commas (only Via is split)
_value = st.text(
    alphabet=st.characters(min_codepoint=0x21, max_codepoint=0x7E, blacklist_characters=","),
    min_size=1, max_size=30,
)
_extra_name = st.sampled_from(["User-Agent", "X-Trace", "Subject", "Allow", "Supported",
                               "Route", "Record-Route", "Accept", "X-Custom-Header"])
_methods = st.sampled_from(["INVITE", "ACK", "OPTIONS", "BYE", "CANCEL", "REGISTER",
                            "INFO", "MESSAGE", "SUBSCRIBE"])


@st.composite
def requests(draw):
    method = draw(_methods)
    uri = draw(uris)
    headers = [
        HeaderField("Via", f"SIP/2.0/UDP {draw(_host)}:{draw(st.integers(1, 65535))};branch={new_branch()}"),
        HeaderField("Max-Forwards", str(draw(st.integers(0, 255)))),
        HeaderField("From", f"<{draw(uris)}>;tag={draw(token)}"),
        HeaderField("To", f"<{draw(uris)}>"),
        HeaderField("Call-ID", draw(_value)),
        HeaderField("CSeq", f"{draw(st.integers(0, 2**31 - 1))} {method}"),
    ]
    extras = draw(st.lists(st.tuples(_extra_name, _value), max_size=5))
    headers += [HeaderField(n, v) for n, v in extras]
    order = draw(st.permutations(range(len(headers))))
    body = draw(st.binary(max_size=200))
    return SipRequest(SipMethod(method), uri, tuple(headers[i] for i in order), body)


@st.composite
def responses(draw):
    req = draw(requests())
    code = draw(st.integers(100, 699))
    reason = draw(st.one_of(st.just(""), token))
    return build_response(req, code, reason, to_tag=draw(st.one_of(st.none(), token)),
                          body=draw(st.binary(max_size=100)))


