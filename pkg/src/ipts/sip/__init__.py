from .message import (
    MANDATORY_HEADERS,
    MAX_MESSAGE_BYTES,
    BodyLengthMismatch,
    HeaderField,
    MalformedStartLine,
    MissingMandatoryHeader,
    ParseError,
    SipMessage,
    SipMethod,
    SipRequest,
    SipResponse,
    StatusClass,
    StatusCode,
    StatusOutOfRange,
    build_response,
    classify_status,
    new_branch,
    new_call_id,
    new_tag,
    parse_message,
    serialize_message,
    validate,
)
from .sdp import Direction, MalformedSdp, SdpBody, audio_offer, parse_sdp, serialize_sdp
from .uri import (
    DEFAULT_PORT,
    MalformedUri,
    NameAddr,
    SipUri,
    Via,
    parse_name_addr,
    parse_uri,
    parse_via,
)

__all__ = [
    "BodyLengthMismatch",
    "DEFAULT_PORT",
    "Direction",
    "HeaderField",
    "MANDATORY_HEADERS",
    "MAX_MESSAGE_BYTES",
    "MalformedSdp",
    "MalformedStartLine",
    "MalformedUri",
    "MissingMandatoryHeader",
    "NameAddr",
    "ParseError",
    "SdpBody",
    "SipMessage",
    "SipMethod",
    "SipRequest",
    "SipResponse",
    "SipUri",
    "StatusClass",
    "StatusCode",
    "StatusOutOfRange",
    "Via",
    "audio_offer",
    "build_response",
    "classify_status",
    "new_branch",
    "new_call_id",
    "new_tag",
    "parse_message",
    "parse_name_addr",
    "parse_sdp",
    "parse_uri",
    "parse_via",
    "serialize_message",
    "serialize_sdp",
    "validate",
]
