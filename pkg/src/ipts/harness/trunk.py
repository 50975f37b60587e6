"""A stand-in for a trunk provider: challenges, rings, answers and echoes audio."""

from __future__ import annotations

import asyncio
import logging
import random
from dataclasses import dataclass, field

from ..dialog import Dialog, UaCore
from ..media import PortAllocator, RtpSession
from ..registrar import NonceStore, StaleNonce, verify_digest
from ..sip import (
    MalformedSdp,
    SipRequest,
    SipUri,
    audio_offer,
    build_response,
    new_tag,
    parse_sdp,
    serialize_sdp,
)
from ..sip.digest import challenge_header, ha1, parse_digest
from ..transaction import ServerTransaction, SipEndpoint, State, TimerConfig

log = logging.getLogger(__name__)


@dataclass
class TrunkCall:
    dialog: Dialog
    session: RtpSession
    invite: SipRequest


@dataclass
class TrunkStats:
    invites: list[SipRequest] = field(default_factory=list)
    challenged: int = 0
    answered: int = 0
    ended: int = 0


class TrunkSim(UaCore):
    """Accepts calls from an authenticated account and loops their media back.

    ``reply`` forces a final status instead of answering. ``challenge`` picks
    the status used to ask for credentials (407, 401, or 0 for none).
    """

    def __init__(self, host: str, port: int = 5060, *, username: str = "trunkuser",
                 password: str = "secret", realm: str = "trunk", challenge: int = 407,
                 answer_after: float = 0.2, reply: int | None = None, clock=None,
                 timers: TimerConfig | None = None, name: str = "trunk",
                 media_ports: tuple[int, int] = (40000, 49998)):
        endpoint = SipEndpoint(host, port, clock=clock, timers=timers, name=name)
        super().__init__(endpoint, user="trunk")
        self.name = name
        self.username = username
        self.credential = ha1(username, realm, password)
        self.realm = realm
        self.challenge = challenge
        self.answer_after = answer_after
        self.reply = reply
        self.nonces = NonceStore()
        self.media_ports = media_ports
        self.calls: dict[tuple, TrunkCall] = {}
        self.stats = TrunkStats()
        self._ports: PortAllocator | None = None
        self._hook = None

    async def start(self, hook=None) -> None:
        self._hook = hook
        self._ports = PortAllocator(self.endpoint.host, *self.media_ports, hook=hook)
        await self.endpoint.start(hook)

    def close(self) -> None:
        for call in self.calls.values():
            call.session.close()
        self.calls.clear()
        self.endpoint.close()

    @property
    def addr(self):
        return self.endpoint.addr

    def _authorized(self, req: SipRequest) -> bool:
        if not self.challenge:
            return True
        header = "Proxy-Authorization" if self.challenge == 407 else "Authorization"
        value = req.header(header)
        if value is None:
            return False
        try:
            params = parse_digest(value)
            if params.get("username") != self.username:
                return False
            self.nonces.consume(params.get("nonce", ""), self.now())
        except (ValueError, StaleNonce):
            return False
        return verify_digest(req, self.credential, params["nonce"], header)

    def on_invite(self, tx: ServerTransaction, req: SipRequest, source) -> None:
        self.stats.invites.append(req)
        if not self._authorized(req):
            self.stats.challenged += 1
            header = "Proxy-Authenticate" if self.challenge == 407 else "WWW-Authenticate"
            nonce = self.nonces.issue(self.now())
            tx.respond(build_response(req, self.challenge,
                                      headers=((header, challenge_header(self.realm, nonce)),)))
            return
        tx.respond(build_response(req, 100))
        if self.reply is not None:
            tx.respond(build_response(req, self.reply))
            return
        tag = new_tag()
        tx.respond(build_response(req, 180, to_tag=tag))
        self.endpoint.clock.call_later(self.answer_after, self._answer_later, tx, req, tag)

    def _answer_later(self, tx: ServerTransaction, req: SipRequest, tag: str) -> None:
        asyncio.get_running_loop().create_task(self._answer(tx, req, tag))

    async def _answer(self, tx: ServerTransaction, req: SipRequest, tag: str) -> None:
        if tx.state in (State.COMPLETED, State.TERMINATED):
            return  # cancelled while ringing
        remote = None
        if req.body:
            try:
                remote = parse_sdp(req.body).media_addr
            except MalformedSdp:
                remote = None
        session = await RtpSession.open(self._ports, remote)
        session.relay_to(session)
        host, port = session.local_addr
        body = serialize_sdp(audio_offer(host, port, session_id=random.getrandbits(31)))
        dialog = Dialog.as_uas(req, tag, self.contact)
        self.calls[dialog.key] = TrunkCall(dialog, session, req)
        self.stats.answered += 1
        self.answer(tx, dialog, body)

    def on_in_dialog(self, dialog, tx, req) -> None:
        call = self.calls.get(dialog.key)
        if req.method.value == "INVITE" and call is not None:
            host, port = call.session.local_addr
            body = serialize_sdp(audio_offer(host, port))
            self.answer(tx, dialog, body)
            return
        tx.respond(build_response(req, 200))

    def on_dialog_ended(self, dialog, reason: str) -> None:
        call = self.calls.pop(dialog.key, None)
        if call is not None:
            call.session.close()
            self.stats.ended += 1

    def hangup_all(self) -> None:
        for key, call in list(self.calls.items()):
            self.send_bye(call.dialog)
            self.on_dialog_ended(call.dialog, "local")

    @property
    def uri(self) -> SipUri:
        host, port = self.addr
        return SipUri(host, None, port)
