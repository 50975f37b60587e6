"""Softphone user agent: registration, calls, hold, DTMF, transfer, forwarding.

The phone is where call intelligence lives: it decides its own ring timeout
(answering 480 when nobody picks up), redirects callers with 302 when call
forwarding is on, and transfers calls by re-originating them itself.
"""

from __future__ import annotations

import enum
import logging
import random
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .dialog import Dialog, OutgoingInvite, UaCore, answer_with_credentials
from .media import SILENCE, PortAllocator, RtpSession, SilenceSource, ToneSource, decode_pcmu
from .media.g711 import FRAME_SAMPLES
from .media.rtp import RtpPacket
from .net import Addr
from .sip import (
    Direction,
    HeaderField,
    MalformedSdp,
    SdpBody,
    SipMethod,
    SipRequest,
    SipResponse,
    SipUri,
    audio_offer,
    build_response,
    new_call_id,
    new_tag,
    parse_sdp,
    serialize_sdp,
)
from .transaction import ServerTransaction, SipEndpoint, TimerConfig

log = logging.getLogger(__name__)


MAX_GAP_FRAMES = 50


class InvalidTransition(RuntimeError):
    pass


class Registration(str, enum.Enum):
    UNREGISTERED = "Unregistered"
    REGISTERING = "Registering"
    REGISTERED = "Registered"


class CallPhase(str, enum.Enum):
    IDLE = "Idle"
    RINGING_IN = "RingingIn"
    RINGING_OUT = "RingingOut"
    ACTIVE = "Active"
    HELD = "Held"


@dataclass
class SoftphoneState:
    registration: Registration = Registration.UNREGISTERED
    expires_at: float | None = None
    call: CallPhase = CallPhase.IDLE
    ring_timeout_s: float = 30.0
    forward_target: str | None = None


# command -> phases it is legal in (None: any phase)
TRANSITIONS: dict[str, tuple[CallPhase, ...] | None] = {
    "register": None,
    "unregister": None,
    "forward": None,
    "call": (CallPhase.IDLE,),
    "answer": (CallPhase.RINGING_IN,),
    "hold": (CallPhase.ACTIVE,),
    "unhold": (CallPhase.HELD,),
    "dtmf": (CallPhase.ACTIVE,),
    "transfer": (CallPhase.ACTIVE, CallPhase.HELD),
    "hangup": (CallPhase.RINGING_IN, CallPhase.RINGING_OUT, CallPhase.ACTIVE, CallPhase.HELD),
}


def _sdp(body: bytes) -> SdpBody | None:
    if not body:
        return None
    try:
        return parse_sdp(body)
    except MalformedSdp:
        return None


class Phone(UaCore):
    def __init__(self, host: str, port: int = 0, *, name: str = "phone", domain: str = "pbx",
                 clock=None, timers: TimerConfig | None = None, tone_hz: float | None = None,
                 ring_timeout_s: float = 30.0, media_ports: tuple[int, int] = (30000, 39998),
                 register_expires: int = 3600):
        endpoint = SipEndpoint(host, port, clock=clock, timers=timers, name=name)
        super().__init__(endpoint, user="phone", credentials=self._creds)
        self.name = name
        self.domain = domain
        self.tone_hz = tone_hz
        self.state = SoftphoneState(ring_timeout_s=ring_timeout_s)
        self.media_ports = media_ports
        self.register_expires = register_expires
        self.extension: str | None = None
        self.password: str | None = None
        self.proxies: list[Addr] = []
        self.proxy_index = 0
        self.session: RtpSession | None = None
        self.events: list[tuple[float, str]] = []
        self.on_event: Callable[[str], None] | None = None
        self.dialog: Dialog | None = None
        self.pending_call: OutgoingInvite | None = None
        self.incoming: tuple[ServerTransaction, Dialog] | None = None
        self.remote_sdp: SdpBody | None = None
        self.local_sdp: SdpBody | None = None
        self.frames: list[np.ndarray] = []
        self._last_audio: tuple[int, int] | None = None  # (ssrc, timestamp)
        self.rtp_sources: dict[Addr, int] = {}
        self.transfer: _Transfer | None = None
        self.last_failure: int | None = None
        self._ring_timer = None
        self._refresh_timer = None
        self._register_tx = None

    # lifecycle -------------------------------------------------------------

    async def start(self, hook=None) -> None:
        await self.endpoint.start(hook)
        ports = PortAllocator(self.endpoint.host, *self.media_ports, hook=hook)
        self.session = await RtpSession.open(ports)
        self.session.listeners.append(self._on_rtp)

    def close(self) -> None:
        self._cancel(self._ring_timer)
        self._cancel(self._refresh_timer)
        if self.session is not None:
            self.session.close()
        self.endpoint.close()

    @staticmethod
    def _cancel(handle) -> None:
        if handle is not None:
            handle.cancel()

    @property
    def proxy(self) -> Addr | None:
        return self.proxies[self.proxy_index] if self.proxies else None

    @property
    def addr(self) -> Addr:
        return self.endpoint.addr

    def emit(self, text: str) -> None:
        self.events.append((self.now(), text))
        log.info("%s: %s", self.name, text)
        if self.on_event:
            self.on_event(text)

    def saw(self, text: str) -> bool:
        return any(e == text or e.startswith(text) for _, e in self.events)

    def _check(self, command: str) -> None:
        allowed = TRANSITIONS[command]
        if allowed is not None and self.state.call not in allowed:
            raise InvalidTransition(f"cannot {command} while {self.state.call.value}")

    # media -----------------------------------------------------------------

    def _on_rtp(self, pkt: RtpPacket, addr: Addr) -> None:
        self.rtp_sources[addr] = self.rtp_sources.get(addr, 0) + 1
        if pkt.payload_type == 0 and len(pkt.payload) == FRAME_SAMPLES:
            if self._last_audio is not None and self._last_audio[0] == pkt.ssrc:
                # lost frames become silence so the waveform keeps its phase
                gap = ((pkt.timestamp - self._last_audio[1]) & 0xFFFFFFFF) // FRAME_SAMPLES - 1
                if 0 < gap <= MAX_GAP_FRAMES:
                    self.frames.extend([SILENCE] * gap)
            self._last_audio = (pkt.ssrc, pkt.timestamp)
            self.frames.append(decode_pcmu(pkt.payload))

    def received_audio(self, last_frames: int | None = None) -> np.ndarray:
        frames = self.frames if last_frames is None else self.frames[-last_frames:]
        if not frames:
            return np.zeros(0, dtype=np.int16)
        return np.concatenate(frames)

    def _offer(self, direction: Direction = Direction.SENDRECV) -> bytes:
        host, port = self.session.local_addr
        if self.local_sdp is None:
            self.local_sdp = audio_offer(host, port, session_id=random.getrandbits(31))
        else:
            self.local_sdp = self.local_sdp.bumped()
        return serialize_sdp(self.local_sdp.with_direction(direction))

    def _start_media(self, remote: SdpBody | None) -> None:
        if remote is not None and remote.connection_address != "0.0.0.0":
            self.remote_sdp = remote
            self.session.remote_addr = remote.media_addr
        if remote is not None and remote.direction in (Direction.SENDONLY, Direction.INACTIVE):
            self.session.stop_playing()
            return
        source = ToneSource(self.tone_hz) if self.tone_hz else SilenceSource()
        self.session.play(source, "tone")

    def _stop_media(self) -> None:
        if self.session is not None:
            self.session.stop_playing()
            self.session.remote_addr = None

    # registration ------------------------------------------------------------

    def register(self, extension: str, password: str, proxies: list[Addr] | Addr,
                 expires: int | None = None) -> None:
        if isinstance(proxies, tuple):
            proxies = [proxies]
        self.extension = extension
        self.user = extension
        self.password = password
        self.proxies = list(proxies)
        self.proxy_index = 0
        self._send_register(self.register_expires if expires is None else expires)

    def unregister(self) -> None:
        if self.extension and self.proxy:
            self._send_register(0)

    def _creds(self, realm: str) -> tuple[str, str] | None:
        if self.extension is None or self.password is None:
            return None
        return (self.extension, self.password)

    def _aor(self) -> SipUri:
        return SipUri(self.domain, self.extension)

    def _send_register(self, expires: int, call_id: str | None = None, cseq: int = 1,
                       auth: SipRequest | None = None) -> None:
        self.state.registration = Registration.REGISTERING
        aor = self._aor()
        req = SipRequest(SipMethod.REGISTER, SipUri(self.domain), (
            HeaderField("Via", self.endpoint.via()),
            HeaderField("Max-Forwards", "70"),
            HeaderField("From", f"<{aor}>;tag={new_tag()}"),
            HeaderField("To", f"<{aor}>"),
            HeaderField("Call-ID", call_id or new_call_id(self.endpoint.host)),
            HeaderField("CSeq", f"{cseq} REGISTER"),
            HeaderField("Contact", f"<{self.contact}>"),
            HeaderField("Expires", str(expires)),
        ))
        self._register_tx = self.endpoint.create_client_tx(
            req, self.proxy, lambda r: self._on_register(req, expires, r, auth is None))

    def _on_register(self, req: SipRequest, expires: int, resp: SipResponse,
                     may_retry: bool) -> None:
        if resp.code < 200:
            return
        if resp.code == 401 and may_retry:
            retry = answer_with_credentials(req, resp, self._creds)
            if retry is not None:
                num = req.cseq[0] + 1
                retry = retry.replace_first("Via", self.endpoint.via())
                retry = retry.with_header("CSeq", f"{num} REGISTER")
                self._register_tx = self.endpoint.create_client_tx(
                    retry, self.proxy, lambda r: self._on_register(retry, expires, r, False))
                return
        if 200 <= resp.code < 300:
            if expires == 0:
                self.state.registration = Registration.UNREGISTERED
                self.state.expires_at = None
                self.emit("UNREGISTERED")
                return
            granted = expires
            for value in resp.header_values("Contact"):
                if str(self.contact) in value and "expires=" in value:
                    granted = int(value.rsplit("expires=", 1)[1].split(";")[0])
            self.state.registration = Registration.REGISTERED
            self.state.expires_at = self.now() + granted
            self._cancel(self._refresh_timer)
            self._refresh_timer = self.endpoint.clock.call_later(
                max(1.0, granted / 2), lambda: self._send_register(expires))
            self.emit("REGISTERED")
            return
        self.state.registration = Registration.UNREGISTERED
        if resp.code == 408 and len(self.proxies) > 1:
            # proxy gone: move on to the next one and try again
            self.proxy_index = (self.proxy_index + 1) % len(self.proxies)
            self.emit(f"FAILOVER {self.proxy[0]}:{self.proxy[1]}")
            self._send_register(expires)
            return
        self.emit(f"REGISTER FAILED {resp.code} {resp.status.reason}")

    # outgoing calls --------------------------------------------------------

    def call(self, digits: str) -> None:
        self._check("call")
        if self.proxy is None:
            raise InvalidTransition("not registered to any proxy")
        self.last_failure = None
        target = SipUri(self.domain, digits)
        self.local_sdp = None
        invite = self.invite_request(target, from_uri=self._aor(), body=self._offer())
        self.state.call = CallPhase.RINGING_OUT
        self.pending_call = self.send_invite(
            invite, self.proxy,
            on_provisional=self._on_provisional,
            on_answer=self._on_answer,
            on_failure=self._on_failure,
        )
        self.emit(f"CALLING {digits}")

    def _on_provisional(self, resp: SipResponse) -> None:
        if resp.code == 180:
            self.emit("RINGBACK")

    def _on_answer(self, dialog: Dialog, resp: SipResponse) -> None:
        dialog.owner = self
        self.dialog = dialog
        self.pending_call = None
        self.state.call = CallPhase.ACTIVE
        self._start_media(_sdp(resp.body))
        self.emit("ANSWERED")

    def _on_failure(self, resp: SipResponse) -> None:
        self.pending_call = None
        self.last_failure = resp.code
        self.state.call = CallPhase.IDLE
        self.emit(f"{resp.code} {resp.status.reason}")
        if resp.code == 408 and len(self.proxies) > 1:
            self.proxy_index = (self.proxy_index + 1) % len(self.proxies)
            self.emit(f"FAILOVER {self.proxy[0]}:{self.proxy[1]}")
            self._send_register(self.register_expires)

    # incoming calls --------------------------------------------------------

    def on_invite(self, tx: ServerTransaction, req: SipRequest, source: Addr) -> None:
        if self.state.forward_target:
            target = SipUri(self.domain, self.state.forward_target)
            tx.respond(build_response(req, 302, headers=(("Contact", f"<{target}>"),)))
            self.emit(f"FORWARDED {self.state.forward_target}")
            return
        if self.state.call != CallPhase.IDLE:
            tx.respond(build_response(req, 486))
            return
        tag = new_tag()
        dialog = Dialog.as_uas(req, tag, self.contact)
        dialog.owner = self
        self.incoming = (tx, dialog)
        self.remote_sdp = _sdp(req.body)
        self.state.call = CallPhase.RINGING_IN
        tx.respond(build_response(req, 180, to_tag=tag,
                                  headers=(("Contact", f"<{self.contact}>"),)))
        timeout = self.state.ring_timeout_s
        if timeout and timeout > 0:
            self._ring_timer = self.endpoint.clock.call_later(timeout, self._ring_timeout)
        caller = req.from_addr.uri.user or str(req.from_addr.uri)
        self.emit(f"INCOMING {caller}")

    def _ring_timeout(self) -> None:
        self._ring_timer = None
        if self.incoming is None:
            return
        tx, dialog = self.incoming
        self.incoming = None
        self.state.call = CallPhase.IDLE
        tx.respond(build_response(tx.request, 480, to_tag=dialog.local_tag))
        self.emit("MISSED")

    def on_invite_cancelled(self, tx: ServerTransaction) -> None:
        if self.incoming is not None and self.incoming[0] is tx:
            self._cancel(self._ring_timer)
            self.incoming = None
            self.state.call = CallPhase.IDLE
            self.emit("CANCELLED")

    def answer_call(self) -> None:
        self._check("answer")
        tx, dialog = self.incoming
        self.incoming = None
        self._cancel(self._ring_timer)
        self.local_sdp = None
        body = self._offer()
        self.answer(tx, dialog, body)
        self.dialog = dialog
        self.state.call = CallPhase.ACTIVE
        self._start_media(self.remote_sdp)
        self.emit("CONNECTED")

    # mid-call --------------------------------------------------------------

    def hold(self) -> None:
        self._check("hold")
        self.session.stop_playing()
        self.state.call = CallPhase.HELD
        self.reinvite(self.dialog, b"", self._on_reinvite_response,
                      ack_body=lambda r: self._offer(Direction.SENDONLY) if r.body else b"")
        self.emit("HOLD")

    def unhold(self) -> None:
        self._check("unhold")
        self.state.call = CallPhase.ACTIVE
        self.reinvite(self.dialog, self._offer(), self._on_unhold_response)
        self.emit("UNHOLD")

    def _on_reinvite_response(self, resp: SipResponse) -> None:
        if resp.code >= 300:
            self.emit(f"REINVITE {resp.code}")

    def _on_unhold_response(self, resp: SipResponse) -> None:
        if 200 <= resp.code < 300 and self.state.call == CallPhase.ACTIVE:
            self._start_media(_sdp(resp.body))
        elif resp.code >= 300:
            self.emit(f"REINVITE {resp.code}")

    def send_dtmf(self, digit: str) -> None:
        self._check("dtmf")
        self.session.send_dtmf(digit)
        self.emit(f"DTMF {digit}")

    def set_forward(self, target: str | None) -> None:
        self.state.forward_target = target
        self.emit(f"FORWARD {target or 'off'}")

    def hangup(self) -> None:
        self._check("hangup")
        phase = self.state.call
        if phase == CallPhase.RINGING_OUT and self.pending_call is not None:
            self.pending_call.cancel()
            self.pending_call = None
        elif phase == CallPhase.RINGING_IN and self.incoming is not None:
            tx, dialog = self.incoming
            self.incoming = None
            self._cancel(self._ring_timer)
            tx.respond(build_response(tx.request, 603, to_tag=dialog.local_tag))
        elif self.dialog is not None:
            if self.transfer is not None:
                self.transfer.drop()
            else:
                self.send_bye(self.dialog, self._on_bye_response)
        self.dialog = None
        self.state.call = CallPhase.IDLE
        self._stop_media()
        self.emit("HUNGUP")

    def _on_bye_response(self, resp: SipResponse) -> None:
        if resp.code >= 200:
            self.emit(f"BYE {resp.code}")

    # dialog hooks ----------------------------------------------------------

    def on_in_dialog(self, dialog: Dialog, tx: ServerTransaction, req: SipRequest) -> None:
        if self.transfer is not None and self.transfer.owns(dialog):
            self.transfer.on_in_dialog(dialog, tx, req)
            return
        if req.method != SipMethod.INVITE:
            tx.respond(build_response(req, 200))
            return
        offer = _sdp(req.body)
        if offer is None:
            # delayed offer: we offer in the 200, the answer rides on the ACK
            self.answer(tx, dialog, self._offer())
            return
        held = offer.is_hold
        direction = {Direction.SENDONLY: Direction.RECVONLY,
                     Direction.INACTIVE: Direction.INACTIVE}.get(offer.direction,
                                                                 Direction.SENDRECV)
        self.answer(tx, dialog, self._offer(direction))
        if held:
            self.session.stop_playing()
            self.emit("HELD BY PEER")
        elif self.state.call == CallPhase.ACTIVE:
            self._start_media(offer)
            self.emit("RESUMED")

    def on_dialog_ack(self, dialog: Dialog, req: SipRequest) -> None:
        if req.body and self.state.call == CallPhase.ACTIVE:
            answer = _sdp(req.body)
            if answer is None:
                return
            if answer.is_hold:
                # delayed-offer hold: only the ACK says we are held
                self.session.stop_playing()
                self.emit("HELD BY PEER")
            else:
                self._start_media(answer)

    def on_dialog_ended(self, dialog: Dialog, reason: str) -> None:
        if self.transfer is not None and self.transfer.owns(dialog):
            self.transfer.ended(dialog)
            return
        if dialog is self.dialog:
            self.dialog = None
            self.state.call = CallPhase.IDLE
            self._stop_media()
            self.emit("ENDED")

    # transfer --------------------------------------------------------------

    def transfer_to(self, extension: str) -> None:
        """Connect the current peer to ``extension`` and step out of the media path."""
        self._check("transfer")
        peer_sdp = self.remote_sdp
        if peer_sdp is None:
            raise InvalidTransition("no peer media to transfer")
        self.session.stop_playing()
        self.transfer = _Transfer(self, self.dialog, peer_sdp, extension)
        self.transfer.start()
        self.emit(f"TRANSFERRING {extension}")


class _Transfer:
    """Third-party call control: B and C end up talking directly.

    The phone calls C offering B's media address, then re-INVITEs B with C's
    answer. It keeps both dialogs (the proxy still routes BYEs through it) and
    relays hang-ups from one side to the other.
    """

    def __init__(self, phone: Phone, peer: Dialog, peer_sdp: SdpBody, extension: str):
        self.phone = phone
        self.peer = peer
        self.peer_sdp = peer_sdp
        self.extension = extension
        self.target: Dialog | None = None
        self.target_sdp: SdpBody | None = None

    def owns(self, dialog: Dialog) -> bool:
        return dialog is self.peer or dialog is self.target

    def start(self) -> None:
        phone = self.phone
        offer = replace(self.peer_sdp, direction=Direction.SENDRECV).bumped()
        invite = phone.invite_request(SipUri(phone.domain, self.extension),
                                      from_uri=phone._aor(), body=serialize_sdp(offer))
        phone.send_invite(invite, phone.proxy, on_answer=self._answered, on_failure=self._failed)

    def _answered(self, dialog: Dialog, resp: SipResponse) -> None:
        self.target = dialog
        dialog.owner = self
        answer = _sdp(resp.body)
        self.target_sdp = answer
        phone = self.phone
        if answer is not None:
            phone.reinvite(self.peer, serialize_sdp(answer.bumped()))
        phone.dialog = None
        phone.state.call = CallPhase.IDLE
        phone._stop_media()
        phone.emit("TRANSFERRED")

    def _failed(self, resp: SipResponse) -> None:
        phone = self.phone
        phone.transfer = None
        phone.emit(f"TRANSFER FAILED {resp.code}")
        if phone.state.call == CallPhase.ACTIVE and phone.dialog is not None:
            phone._start_media(self.peer_sdp)

    def on_in_dialog(self, dialog: Dialog, tx: ServerTransaction, req: SipRequest) -> None:
        if req.method == SipMethod.INVITE:
            # media flows peer-to-peer: answer with the other party's description
            other_sdp = self.target_sdp if dialog is self.peer else self.peer_sdp
            self.phone.answer(tx, dialog, serialize_sdp(other_sdp.bumped()) if other_sdp else b"")
        else:
            tx.respond(build_response(req, 200))

    def ended(self, dialog: Dialog) -> None:
        other = self.target if dialog is self.peer else self.peer
        if other is not None and not other.terminated:
            self.phone.send_bye(other)
        self.phone.transfer = None
        self.phone.emit("TRANSFER ENDED")

    def drop(self) -> None:
        for d in (self.peer, self.target):
            if d is not None and not d.terminated:
                self.phone.send_bye(d)
        self.phone.transfer = None


__all__ = [
    "CallPhase",
    "InvalidTransition",
    "Phone",
    "Registration",
    "SoftphoneState",
    "TRANSITIONS",
]
