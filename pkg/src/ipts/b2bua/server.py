"""Back-to-back user agent: feature calls and bridged calls.

The B2BUA runs two SIP endpoints. The inside one faces the proxy and the
phones; the outside one faces trunk providers and only ever carries the public
address, so nothing about the internal network crosses the border. Every call
it touches anchors media on its own RTP ports.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import os
import random
import shutil
from dataclasses import dataclass
from pathlib import Path

from ..dialog import Dialog, OutgoingInvite, UaCore
from ..media import ConferenceRoom, MediaPortExhausted, PortAllocator, RoomFull, RtpSession
from ..media.session import dtmf_listener
from ..net import Addr
from ..sip import (
    Direction,
    MalformedSdp,
    MalformedUri,
    SdpBody,
    SipMethod,
    SipRequest,
    SipResponse,
    SipUri,
    audio_offer,
    build_response,
    new_tag,
    parse_name_addr,
    parse_sdp,
    serialize_sdp,
)
from ..transaction import ServerTransaction, SipEndpoint, TimerConfig
from .config import B2buaConfig, TrunkProfile
from .dialplan import Action, NoMatch, match_dialplan
from .prompts import IVR_GREETING, IVR_INVALID, MOH, VM_GREETING, ensure_prompts
from .topology import rewrite_topology

log = logging.getLogger(__name__)


class DiskFull(OSError):
    pass


class CallState(str, enum.Enum):
    SETUP = "Setup"
    BRIDGED = "Bridged"
    HELD = "Held"
    TEARING = "Tearing"


def _sdp(body: bytes) -> SdpBody | None:
    if not body:
        return None
    try:
        return parse_sdp(body)
    except MalformedSdp:
        return None


def _answer_direction(offer: SdpBody | None) -> Direction:
    if offer is None:
        return Direction.SENDRECV
    return {
        Direction.SENDONLY: Direction.RECVONLY,
        Direction.RECVONLY: Direction.SENDONLY,
        Direction.INACTIVE: Direction.INACTIVE,
    }.get(offer.direction, Direction.SENDRECV)


def _is_hold(req: SipRequest) -> bool:
    if not req.body:
        return True
    offer = _sdp(req.body)
    return offer is not None and offer.is_hold


@dataclass
class CallLeg:
    """One side of a call as the B2BUA sees it."""

    side: _Side
    session: RtpSession | None = None
    dialog: Dialog | None = None
    tx: ServerTransaction | None = None
    outgoing: OutgoingInvite | None = None
    local_tag: str = ""
    remote_sdp: SdpBody | None = None
    local_sdp: SdpBody | None = None

    @property
    def call_id(self) -> str | None:
        if self.dialog is not None:
            return self.dialog.call_id
        if self.tx is not None:
            return self.tx.request.call_id
        if self.outgoing is not None:
            return self.outgoing.call_id
        return None

    def our_sdp(self, offer: SdpBody | None = None) -> bytes:
        host, port = self.session.local_addr
        if self.local_sdp is None:
            self.local_sdp = audio_offer(host, port, session_id=random.getrandbits(31))
        else:
            self.local_sdp = self.local_sdp.bumped()
        return serialize_sdp(self.local_sdp.with_direction(_answer_direction(offer)))

    def learn_remote(self, sdp: SdpBody | None) -> None:
        if sdp is None or sdp.connection_address == "0.0.0.0":
            return
        self.remote_sdp = sdp
        if self.session is not None:
            self.session.remote_addr = sdp.media_addr

    def close(self) -> None:
        if self.session is not None:
            self.session.close()


class _Side(UaCore):
    """A UA core that hands every call-level event to the B2BUA."""

    def __init__(self, b2bua: B2bua, endpoint: SipEndpoint, name: str):
        super().__init__(endpoint, user="b2bua")
        self.b2bua = b2bua
        self.name = name

    def on_invite(self, tx, req, source):
        self.b2bua.on_invite(self, tx, req, source)

    def on_in_dialog(self, dialog, tx, req):
        owner = dialog.owner
        if owner is None:
            super().on_in_dialog(dialog, tx, req)
        else:
            owner.on_in_dialog(self, dialog, tx, req)

    def on_dialog_ack(self, dialog, req):
        if dialog.owner is not None:
            dialog.owner.on_ack(dialog, req)

    def on_dialog_ended(self, dialog, reason):
        if dialog.owner is not None:
            dialog.owner.ended(dialog, reason)

    def on_invite_cancelled(self, tx):
        call = self.b2bua.pending.pop(tx.key, None)
        if call is not None:
            call.cancelled()


class FeatureCall:
    """A call the B2BUA answers itself (MOH, voicemail, conference, IVR)."""

    kind = "feature"

    def __init__(self, b2bua: B2bua, side: _Side, tx: ServerTransaction, req: SipRequest):
        self.b2bua = b2bua
        self.side = side
        self.tx = tx
        self.req = req
        self.leg = CallLeg(side, tx=tx, local_tag=new_tag(), remote_sdp=_sdp(req.body))
        self.done = False

    @property
    def session(self) -> RtpSession | None:
        return self.leg.session

    async def setup(self) -> bool:
        """Allocate media. False means the call was already refused."""
        remote = self.leg.remote_sdp.media_addr if self.leg.remote_sdp else None
        try:
            self.leg.session = await RtpSession.open(self.b2bua.inside_ports, remote)
        except MediaPortExhausted:
            self.refuse(503)
            return False
        if self.done:
            self.leg.close()
            return False
        return True

    def refuse(self, code: int) -> None:
        self.done = True
        self.b2bua.pending.pop(self.tx.key, None)
        self.tx.respond(build_response(self.req, code))

    def answer(self) -> None:
        self.b2bua.pending.pop(self.tx.key, None)
        dialog = Dialog.as_uas(self.req, self.leg.local_tag, self.side.contact)
        dialog.owner = self
        self.leg.dialog = dialog
        self.side.answer(self.tx, dialog, self.leg.our_sdp(self.leg.remote_sdp))
        self.b2bua.active.add(self)

    def on_in_dialog(self, side, dialog, tx, req) -> None:
        if req.method == SipMethod.INVITE:
            offer = _sdp(req.body)
            if not _is_hold(req):
                self.leg.learn_remote(offer)
            side.answer(tx, dialog, self.leg.our_sdp(offer))
        else:
            tx.respond(build_response(req, 200))

    def on_ack(self, dialog, req) -> None:
        if req.body:
            self.leg.learn_remote(_sdp(req.body))

    def ended(self, dialog, reason: str) -> None:
        self.cleanup()

    def cancelled(self) -> None:
        self.done = True
        self.cleanup()

    def hangup(self) -> None:
        if self.leg.dialog is not None and not self.leg.dialog.terminated:
            self.side.send_bye(self.leg.dialog)
        self.cleanup()

    def cleanup(self) -> None:
        self.done = True
        self.leg.close()
        self.b2bua.active.discard(self)


class MohCall(FeatureCall):
    kind = "moh"

    def answer(self) -> None:
        super().answer()
        self.session.stream_file(self.b2bua.prompt(MOH), loop=True)


class VoicemailCall(FeatureCall):
    kind = "voicemail"

    def __init__(self, b2bua, side, tx, req, mailbox: str):
        super().__init__(b2bua, side, tx, req)
        self.mailbox = mailbox
        self.started_ms: int | None = None
        self.path: Path | None = None
        self._limit = None

    @property
    def box_dir(self) -> Path:
        return self.b2bua.cfg.vmdir / self.mailbox

    def check_space(self) -> None:
        try:
            self.box_dir.mkdir(parents=True, exist_ok=True)
            free = shutil.disk_usage(self.box_dir).free
        except OSError as exc:
            raise DiskFull(str(exc)) from exc
        if free < self.b2bua.cfg.min_free_bytes:
            raise DiskFull(f"only {free} bytes free under {self.box_dir}")

    def answer(self) -> None:
        super().answer()
        self.session.on_source_end = self.start_recording
        self.session.stream_file(self.b2bua.prompt(VM_GREETING), loop=False)

    def start_recording(self) -> None:
        if self.done:
            return
        self.session.on_source_end = None
        self.started_ms = int(self.b2bua.now() * 1000)
        self.path = self.box_dir / f"{self.started_ms}.wav"
        try:
            self.session.record(self.path)
        except OSError as exc:
            log.warning("voicemail: cannot record to %s: %s", self.path, exc)
            self.path = None
            self.hangup()
            return
        self._limit = self.b2bua.clock.call_later(self.b2bua.cfg.voicemail_max_s, self.hangup)

    def cleanup(self) -> None:
        if self._limit is not None:
            self._limit.cancel()
            self._limit = None
        writer = self.session.stop_recording() if self.session else None
        if writer is not None and self.path is not None:
            self.file_message(writer.samples_written)
        super().cleanup()

    def file_message(self, samples: int) -> None:
        path, self.path = self.path, None
        if samples == 0:
            path.unlink(missing_ok=True)
            return
        duration_ms = samples * 1000 // 8000
        line = f"{self.started_ms},{duration_ms},{path.name}\n"
        fd = os.open(self.box_dir / "index", os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line.encode())
        finally:
            os.close(fd)
        log.info("voicemail: %d ms message for %s", duration_ms, self.mailbox)


class ConferenceCall(FeatureCall):
    kind = "conference"

    def __init__(self, b2bua, side, tx, req, room: str):
        super().__init__(b2bua, side, tx, req)
        self.room_name = room

    def answer(self) -> None:
        room = self.b2bua.rooms.get(self.room_name)
        if room is None:
            room = ConferenceRoom(self.room_name, self.b2bua.cfg.conference_capacity)
            self.b2bua.rooms[self.room_name] = room
        try:
            room.add(self.session)
        except RoomFull:
            self.refuse(486)
            self.leg.close()
            return
        super().answer()

    def cleanup(self) -> None:
        room = self.b2bua.rooms.get(self.room_name)
        if room is not None and self.session is not None:
            room.remove(self.session)
            if len(room) == 0:
                room.close()
                del self.b2bua.rooms[self.room_name]
        super().cleanup()


class IvrCall(FeatureCall):
    """Greeting, then one DTMF digit picks the extension to bridge to."""

    kind = "ivr"

    def __init__(self, b2bua, side, tx, req):
        super().__init__(b2bua, side, tx, req)
        self.menu = b2bua.cfg.ivr
        self.attempts = 0
        self._timer = None
        self.transferring = False
        self.digits: list[str] = []

    def answer(self) -> None:
        super().answer()
        self.session.listeners.append(dtmf_listener(self.on_digit))
        self.play_greeting()

    def play_greeting(self) -> None:
        path = self.menu.greeting_file or self.b2bua.prompt(IVR_GREETING)
        self.session.on_source_end = self.arm_timeout
        self.session.stream_file(path, loop=False)

    def arm_timeout(self) -> None:
        self._cancel_timer()
        if not self.done and not self.transferring:
            self._timer = self.b2bua.clock.call_later(self.menu.timeout_s, self.invalid)

    def _cancel_timer(self) -> None:
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None

    def on_digit(self, digit: str) -> None:
        if self.done or self.transferring:
            return
        self.digits.append(digit)
        self._cancel_timer()
        target = self.menu.digit_map.get(digit)
        if target is None:
            self.invalid()
        else:
            self.transfer(target)

    def invalid(self) -> None:
        self._timer = None
        if self.done or self.transferring:
            return
        self.attempts += 1
        if self.attempts >= self.menu.max_attempts:
            log.info("ivr: %d invalid attempts, hanging up", self.attempts)
            self.hangup()
            return
        path = self.menu.invalid_file or self.b2bua.prompt(IVR_INVALID)
        self.session.on_source_end = self.play_greeting
        self.session.stream_file(path, loop=False)

    def transfer(self, extension: str) -> None:
        self.transferring = True
        self.session.stop_playing()
        self.session.on_source_end = None
        self.b2bua.spawn(self.b2bua.reoriginate(self, extension))

    def transfer_failed(self, code: int) -> None:
        log.info("ivr: transfer failed with %d", code)
        self.transferring = False
        if not self.done:
            self.invalid()

    def cleanup(self) -> None:
        self._cancel_timer()
        super().cleanup()


class BridgedCall:
    """Two independent legs joined by the B2BUA's media relay."""

    def __init__(self, b2bua: B2bua, leg_a: CallLeg, leg_b: CallLeg, req: SipRequest | None):
        self.b2bua = b2bua
        self.leg_a = leg_a
        self.leg_b = leg_b
        self.req = req
        self.state = CallState.SETUP
        self.created_at = b2bua.now()
        self.was_cancelled = False

    # setup ------------------------------------------------------------------

    def on_provisional(self, resp: SipResponse) -> None:
        tx = self.leg_a.tx
        if resp.code in (180, 183) and tx is not None and self.state == CallState.SETUP:
            tx.respond(build_response(self.req, 180, to_tag=self.leg_a.local_tag))

    def on_answer(self, dialog: Dialog, resp: SipResponse) -> None:
        dialog.owner = self
        self.leg_b.dialog = dialog
        self.leg_b.learn_remote(_sdp(resp.body))
        if self.leg_a.dialog is None:
            tx = self.leg_a.tx
            self.b2bua.pending.pop(tx.key, None)
            dialog_a = Dialog.as_uas(self.req, self.leg_a.local_tag, self.leg_a.side.contact)
            dialog_a.owner = self
            self.leg_a.dialog = dialog_a
            self.leg_a.side.answer(tx, dialog_a, self.leg_a.our_sdp(self.leg_a.remote_sdp))
        else:
            self.leg_a.dialog.owner = self
        self.state = CallState.BRIDGED
        self._connect()
        self.b2bua.active.add(self)

    def on_failure(self, resp: SipResponse) -> None:
        tx = self.leg_a.tx
        if self.leg_a.dialog is None and tx is not None and not self.was_cancelled:
            self.b2bua.pending.pop(tx.key, None)
            tx.respond(build_response(self.req, resp.code, resp.status.reason))
        self.cleanup()

    def cancelled(self) -> None:
        self.was_cancelled = True
        self.state = CallState.TEARING
        if self.leg_b.outgoing is not None:
            self.leg_b.outgoing.cancel()
        self.cleanup(keep_b_signalling=True)

    # media -----------------------------------------------------------------

    def _connect(self) -> None:
        a, b = self.leg_a.session, self.leg_b.session
        a.stop_playing()
        b.stop_playing()
        a.relay_to(b)
        b.relay_to(a)

    def _hold(self, holder: CallLeg, held: CallLeg) -> None:
        if self.state == CallState.HELD:
            return
        holder.session.relay_to(None)
        held.session.relay_to(None)
        held.session.stream_file(self.b2bua.prompt(MOH), loop=True)
        self.state = CallState.HELD

    def _unhold(self) -> None:
        if self.state == CallState.HELD:
            self._connect()
            self.state = CallState.BRIDGED

    def _leg_of(self, dialog: Dialog) -> tuple[CallLeg, CallLeg]:
        if self.leg_a.dialog is dialog:
            return self.leg_a, self.leg_b
        return self.leg_b, self.leg_a

    # in-dialog -------------------------------------------------------------

    def on_in_dialog(self, side, dialog, tx, req) -> None:
        if req.method != SipMethod.INVITE:
            tx.respond(build_response(req, 200))
            return
        leg, other = self._leg_of(dialog)
        offer = _sdp(req.body)
        if _is_hold(req):
            self._hold(leg, other)
        else:
            leg.learn_remote(offer)
            self._unhold()
        side.answer(tx, dialog, leg.our_sdp(offer))

    def on_ack(self, dialog, req) -> None:
        if req.body and self.state != CallState.HELD:
            leg, _ = self._leg_of(dialog)
            leg.learn_remote(_sdp(req.body))

    def ended(self, dialog, reason: str) -> None:
        if self.state == CallState.TEARING:
            return
        self.state = CallState.TEARING
        _, other = self._leg_of(dialog)
        if other.dialog is not None and not other.dialog.terminated:
            other.side.send_bye(other.dialog)
        self.cleanup()

    def cleanup(self, keep_b_signalling: bool = False) -> None:
        self.state = CallState.TEARING
        self.leg_a.close()
        self.leg_b.close()
        self.b2bua.active.discard(self)


class B2bua:
    def __init__(self, cfg: B2buaConfig, *, clock=None, timers: TimerConfig | None = None):
        self.cfg = cfg
        self.inside = SipEndpoint(cfg.host, cfg.port, clock=clock, timers=timers, name="b2bua")
        self.outside = SipEndpoint(cfg.public_host, cfg.public_port, clock=clock, timers=timers,
                                   name="b2bua-ext")
        self.clock = self.inside.clock
        self.inside_core = _Side(self, self.inside, "inside")
        self.outside_core = _Side(self, self.outside, "outside")
        self.inside_ports: PortAllocator | None = None
        self.outside_ports: PortAllocator | None = None
        self.rooms: dict[str, ConferenceRoom] = {}
        self.pending: dict = {}
        self.active: set = set()
        self.bridges: list[BridgedCall] = []
        self.prompts: dict[str, Path] = {}
        self._tasks: set[asyncio.Task] = set()

    async def start(self, hook=None) -> None:
        cfg = self.cfg
        self.inside_ports = PortAllocator(cfg.inside_media, cfg.rtp_low, cfg.rtp_high, hook)
        self.outside_ports = PortAllocator(cfg.outside_media, cfg.rtp_low, cfg.rtp_high, hook)
        self.prompts = ensure_prompts(cfg.prompts_dir)
        await self.inside.start(hook)
        await self.outside.start(hook)

    def close(self) -> None:
        for call in list(self.active):
            call.cleanup()
        for room in self.rooms.values():
            room.close()
        self.rooms.clear()
        for task in self._tasks:
            task.cancel()
        self.inside.close()
        self.outside.close()

    @property
    def addr(self) -> Addr:
        return self.inside.addr

    @property
    def public_addr(self) -> Addr:
        return self.outside.addr

    def now(self) -> float:
        return self.clock.time()

    def prompt(self, name: str) -> Path:
        if name not in self.prompts:
            self.prompts = ensure_prompts(self.cfg.prompts_dir)
        return self.prompts[name]

    def spawn(self, coro) -> None:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._task_done)

    def _task_done(self, task: asyncio.Task) -> None:
        self._tasks.discard(task)
        if not task.cancelled() and task.exception() is not None:
            log.error("b2bua task failed", exc_info=task.exception())

    # inbound calls ---------------------------------------------------------

    def on_invite(self, side: _Side, tx: ServerTransaction, req: SipRequest, source: Addr) -> None:
        tx.respond(build_response(req, 100))
        if side is self.outside_core:
            # no inbound trunk routing: nothing outside may originate here
            tx.respond(build_response(req, 403))
            return
        digits = req.uri.user or ""
        try:
            rule = match_dialplan(digits, self.cfg.rules)
        except NoMatch:
            tx.respond(build_response(req, 404))
            return
        log.info("b2bua: %s matched %s -> %s", digits, rule.pattern, rule.action.value)
        if rule.action == Action.BRIDGE:
            trunk = self.cfg.trunks.get(rule.arg or "trunk0")
            if trunk is None:
                tx.respond(build_response(req, 503, "No Trunk"))
                return
            stripped = digits[len(self.cfg.external_prefix):] \
                if digits.startswith(self.cfg.external_prefix) else digits
            self._start(self.bridge_external(side, tx, req, stripped, trunk), tx, None)
            return
        call: FeatureCall
        if rule.action == Action.MOH:
            call = MohCall(self, side, tx, req)
        elif rule.action == Action.VOICEMAIL:
            call = VoicemailCall(self, side, tx, req, self._mailbox(req))
            try:
                call.check_space()
            except DiskFull as exc:
                log.warning("voicemail unavailable: %s", exc)
                tx.respond(build_response(req, 480))
                return
        elif rule.action == Action.CONFERENCE:
            room = self.rooms.get(digits)
            if room is not None and len(room) >= room.capacity:
                tx.respond(build_response(req, 486))
                return
            call = ConferenceCall(self, side, tx, req, digits)
        else:
            call = IvrCall(self, side, tx, req)
        self.pending[tx.key] = call
        self._start(self._run_feature(call), tx, call)

    def _start(self, coro, tx, call) -> None:
        if call is not None:
            self.pending[tx.key] = call
        self.spawn(coro)

    async def _run_feature(self, call: FeatureCall) -> None:
        if await call.setup():
            call.answer()

    def _mailbox(self, req: SipRequest) -> str:
        diversion = req.header("Diversion")
        if diversion:
            try:
                user = parse_name_addr(diversion).uri.user
            except MalformedUri:
                user = None
            if user:
                return user
        return req.from_addr.uri.user or "unknown"

    # bridging --------------------------------------------------------------

    async def bridge_external(self, side: _Side, tx: ServerTransaction, req: SipRequest,
                              digits: str, trunk: TrunkProfile) -> BridgedCall | None:
        leg_a = CallLeg(side, tx=tx, local_tag=new_tag(), remote_sdp=_sdp(req.body))
        leg_b = CallLeg(self.outside_core)
        call = BridgedCall(self, leg_a, leg_b, req)
        self.pending[tx.key] = call
        try:
            remote = leg_a.remote_sdp.media_addr if leg_a.remote_sdp else None
            leg_a.session = await RtpSession.open(self.inside_ports, remote)
            leg_b.session = await RtpSession.open(self.outside_ports)
        except MediaPortExhausted:
            call.on_failure(build_response(req, 503))
            return None
        if call.was_cancelled:
            call.cleanup()
            return None
        host, port = leg_b.session.local_addr
        offer = rewrite_topology(audio_offer(host, port, session_id=random.getrandbits(31)),
                                 (self.cfg.outside_media, port))
        leg_b.local_sdp = offer
        core = self.outside_core
        target = SipUri(trunk.provider_addr[0], digits, trunk.provider_addr[1])
        invite = core.invite_request(
            target,
            from_uri=SipUri(trunk.from_domain, trunk.username or "pbx"),
            to_uri=SipUri(trunk.from_domain, digits),
            body=serialize_sdp(offer),
        )
        leg_b.outgoing = core.send_invite(
            invite, trunk.provider_addr,
            on_provisional=call.on_provisional,
            on_answer=call.on_answer,
            on_failure=call.on_failure,
            credentials=trunk.credentials,
        )
        self.bridges.append(call)
        return call

    async def reoriginate(self, ivr: IvrCall, extension: str) -> None:
        """Bridge an answered IVR caller to ``extension`` through the proxy."""
        proxy = self.cfg.proxy_addr
        if proxy is None:
            ivr.transfer_failed(503)
            return
        leg_b = CallLeg(self.inside_core)
        try:
            leg_b.session = await RtpSession.open(self.inside_ports)
        except MediaPortExhausted:
            ivr.transfer_failed(503)
            return
        call = BridgedCall(self, ivr.leg, leg_b, None)
        host, port = leg_b.session.local_addr
        leg_b.local_sdp = audio_offer(host, port, session_id=random.getrandbits(31))
        core = self.inside_core
        target = SipUri(self.cfg.domain, extension)
        caller = ivr.req.from_addr
        invite = core.invite_request(
            target, from_uri=caller.uri, display=caller.display,
            body=serialize_sdp(leg_b.local_sdp),
        )

        def answered(dialog: Dialog, resp: SipResponse) -> None:
            ivr.session.listeners.clear()
            self.active.discard(ivr)
            call.on_answer(dialog, resp)

        def failed(resp: SipResponse) -> None:
            leg_b.close()
            ivr.transfer_failed(resp.code)

        leg_b.outgoing = core.send_invite(invite, proxy, on_answer=answered, on_failure=failed)
        self.bridges.append(call)


__all__ = [
    "B2bua",
    "BridgedCall",
    "CallLeg",
    "CallState",
    "ConferenceCall",
    "DiskFull",
    "FeatureCall",
    "IvrCall",
    "MohCall",
    "VoicemailCall",
]
