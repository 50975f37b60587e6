"""The routing proxy and registrar front end.

INVITE dialogs are handled statefully: one server transaction towards the
caller, one client transaction per fork branch, Record-Route so the BYE comes
back through us for accounting. Out-of-dialog non-INVITE traffic takes the
stateless path and leaves no table entries behind.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

from ..dialog import Dialog, route_uri, transport_of
from ..net import Addr
from ..registrar import LocationStore, Registrar
from ..sip import (
    Direction,
    HeaderField,
    MalformedSdp,
    MalformedUri,
    ParseError,
    SdpBody,
    SipMethod,
    SipRequest,
    SipResponse,
    SipUri,
    build_response,
    new_branch,
    new_call_id,
    new_tag,
    parse_sdp,
    serialize_sdp,
)
from ..transaction import (
    ClientTransaction,
    ServerTransaction,
    SipEndpoint,
    State,
    TimerConfig,
    TransactionUser,
)
from .cdr import CdrWriter, account
from .config import ProxyConfig
from .routing import (
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

log = logging.getLogger(__name__)

STATELESS_BRANCH = "z9hG4bK-sl"


def _ms(t: float) -> int:
    return int(round(t * 1000))


@dataclass
class Branch:
    uri: SipUri
    dest: Addr
    tx: ClientTransaction | None = None
    final: SipResponse | None = None
    feature: bool = False

    @property
    def pending(self) -> bool:
        return self.final is None


@dataclass
class DialogRecord:
    """What the proxy remembers about an established call."""

    call_id: str
    caller: str
    callee: str
    start: float
    answer: float
    internal: bool
    caller_tag: str
    callee_tag: str
    sdp: dict[str, SdpBody] = field(default_factory=dict)
    moh: MohLeg | None = None
    strip_ack_body: bool = False
    ended: bool = False

    def peer_tag(self, tag: str) -> str:
        return self.callee_tag if tag == self.caller_tag else self.caller_tag


@dataclass
class MohLeg:
    dialog: Dialog
    media: SdpBody


class ProxyCall:
    """One incoming INVITE and all the branches it fans out to."""

    def __init__(self, proxy: ProxyServer, tx: ServerTransaction, req: SipRequest,
                 caller: str, callee: str):
        self.proxy = proxy
        self.tx = tx
        self.req = req
        self.caller = caller
        self.callee = callee
        self.start_time = proxy.now()
        self.branches: list[Branch] = []
        self.winner: Branch | None = None
        self.done = False
        self.cancelled = False
        self.no_answer_fired = False
        self.redirected = False
        self.voicemail_tried = False
        self.internal = False
        self.target_ext: str | None = None
        self._no_answer = None

    @property
    def endpoint(self) -> SipEndpoint:
        return self.proxy.endpoint

    # starting ------------------------------------------------------------

    def start(self, decision: RoutingDecision) -> None:
        cfg = self.proxy.cfg
        if isinstance(decision, Reject):
            self.finish(build_response(self.req, decision.status))
            return
        if isinstance(decision, Internal):
            self.internal = True
            self.target_ext = self.req.uri.user
            for binding in decision.contacts:
                self.add_branch(binding.contact, binding.contact.addr)
            timeout = cfg.no_answer_timeout
            if timeout and timeout > 0:
                self._no_answer = self.endpoint.clock.call_later(timeout, self._on_no_answer)
            return
        if cfg.b2bua_addr is None:
            self.finish(build_response(self.req, 503, "No Media Server"))
            return
        digits = self.req.uri.user or ""
        headers: tuple[tuple[str, str], ...] = ()
        if isinstance(decision, Feature) and decision.kind == FeatureKind.VOICEMAIL:
            if decision.arg is not None:
                headers = (("Diversion", f"<sip:{decision.arg}@{cfg.domain}>"),)
                self.target_ext = decision.arg
            digits = cfg.voicemail_ext
        self.add_branch(SipUri(cfg.b2bua_addr[0], digits, cfg.b2bua_addr[1]),
                        cfg.b2bua_addr, headers, feature=True)

    def add_branch(self, uri: SipUri, dest: Addr, headers=(), feature: bool = False) -> None:
        branch = Branch(uri, dest, feature=feature)
        branch_id = new_branch()
        fwd = self.proxy.prepare_forward(self.req, uri, branch_id, record_route=True)
        for name, value in headers:
            fwd = fwd.with_header(name, value)
        self.branches.append(branch)
        self.proxy.branch_owner[branch_id] = (self, branch)
        self.endpoint.clock.call_later(
            self.endpoint.timers.tx_lifetime + self.endpoint.timers.linger,
            lambda: self.proxy.branch_owner.pop(branch_id, None))
        branch.tx = self.endpoint.create_client_tx(
            fwd, dest, lambda resp, b=branch: self.on_branch_response(b, resp),
            transport=transport_of(uri))

    # responses -----------------------------------------------------------

    def on_branch_response(self, branch: Branch, resp: SipResponse) -> None:
        upstream = resp.drop_first("Via")
        code = resp.code
        if code < 200:
            if code > 100 and not self.done:
                self.tx.respond(upstream)
            return
        if branch.final is not None and code >= 300:
            return
        branch.final = resp
        if code < 300:
            if self.winner is None and not self.done:
                self.winner = branch
                self._stop_timer()
                self.cancel_pending(except_branch=branch)
                self.proxy.call_answered(self, branch, resp)
                self.done = True
                self.tx.respond(upstream)
            elif branch is not self.winner:
                self.proxy.release_loser(resp, branch)
            return
        if self.done or self.winner is not None:
            return
        if any(b.pending for b in self.branches):
            return
        self.resolve()

    def resolve(self) -> None:
        cfg = self.proxy.cfg
        finals = [b.final for b in self.branches if b.final is not None]
        if self.cancelled:
            self.finish(build_response(self.req, 487))
            return
        code = best_response([r.code for r in finals])
        if 300 <= code < 400 and not self.redirected:
            if self._follow_redirect(finals):
                return
        if (self.internal and not self.voicemail_tried and cfg.voicemail_on_no_answer
                and cfg.b2bua_addr is not None and self.target_ext
                and (self.no_answer_fired or code in (408, 480))):
            self.voicemail_tried = True
            self.add_branch(
                SipUri(cfg.b2bua_addr[0], cfg.voicemail_ext, cfg.b2bua_addr[1]),
                cfg.b2bua_addr,
                (("Diversion", f"<sip:{self.target_ext}@{cfg.domain}>"),),
                feature=True,
            )
            return
        if self.no_answer_fired and code == 487:
            self.finish(build_response(self.req, 480))
            return
        chosen = next((r for r in finals if r.code == code), None)
        if chosen is None:
            self.finish(build_response(self.req, code))
        else:
            self.finish(chosen.drop_first("Via"))

    def _follow_redirect(self, finals: list[SipResponse]) -> bool:
        for resp in finals:
            if not 300 <= resp.code < 400 or resp.contact is None:
                continue
            digits = resp.contact.uri.user or ""
            proxy = self.proxy
            caller = proxy.store.subscriber(self.req.from_addr.uri.user)
            decision = classify_digits(
                digits, proxy.cfg, proxy.store.subscribers,
                lambda ext: proxy.store.lookup(SipUri(proxy.cfg.domain, ext), proxy.now()),
                caller, trusted=False)
            self.redirected = True
            self.callee = f"sip:{digits}@{proxy.cfg.domain}"
            self.req = replace(self.req, uri=SipUri(proxy.cfg.domain, digits))
            # earlier finals are superseded by the redirect target's outcome
            self.branches = []
            self.internal = False
            self.start(decision)
            return bool(self.branches) or self.done
        return False

    def finish(self, resp: SipResponse) -> None:
        if self.done:
            return
        self.done = True
        self._stop_timer()
        self.tx.respond(resp)
        self.proxy.call_failed(self, resp.code)

    # cancellation ------------------------------------------------------

    def cancel_pending(self, except_branch: Branch | None = None) -> None:
        for b in self.branches:
            if b is not except_branch and b.pending and b.tx is not None:
                b.tx.cancel()

    def caller_cancelled(self) -> None:
        if self.done:
            return
        self.cancelled = True
        self._stop_timer()
        if any(b.pending for b in self.branches):
            self.cancel_pending()
        else:
            self.resolve()

    def _on_no_answer(self) -> None:
        self._no_answer = None
        if self.done or self.winner is not None:
            return
        self.no_answer_fired = True
        self.cancel_pending()

    def _stop_timer(self) -> None:
        if self._no_answer is not None:
            self._no_answer.cancel()
            self._no_answer = None


def _parse_body(body: bytes) -> SdpBody | None:
    if not body:
        return None
    try:
        return parse_sdp(body)
    except MalformedSdp:
        return None


class ProxyServer(TransactionUser):
    def __init__(self, cfg: ProxyConfig, store: LocationStore | None = None, *,
                 clock=None, timers: TimerConfig | None = None, name: str = "proxy",
                 cdr: CdrWriter | None = None):
        self.cfg = cfg
        self.store = store or LocationStore(
            journal_path=cfg.journal_file, users_path=cfg.users_file,
            external_prefix=cfg.external_prefix)
        self.registrar = Registrar(self.store, cfg.domain)
        self.endpoint = SipEndpoint(cfg.host, cfg.port, clock=clock, timers=timers, name=name)
        self.endpoint.tu = self
        self.cdr = cdr or CdrWriter(cfg.cdr_file)
        self.calls: dict[tuple[str, str], ProxyCall] = {}
        self.recent: dict[str, ProxyCall] = {}
        self.branch_owner: dict[str, tuple[ProxyCall, Branch]] = {}
        self.dialogs: dict[str, DialogRecord] = {}
        self.pending_bye: set[str] = set()

    async def start(self, hook=None) -> None:
        await self.endpoint.start(hook, tcp=self.cfg.tcp)

    def close(self) -> None:
        self.endpoint.close()

    @property
    def addr(self) -> Addr:
        return self.endpoint.addr

    def now(self) -> float:
        return self.endpoint.clock.time()

    @property
    def record_route(self) -> str:
        host, port = self.endpoint.addr
        return f"<sip:{host}:{port};lr>"

    def reload(self) -> None:
        self.store.reload_users(force=True)

    # plumbing --------------------------------------------------------------

    def _is_self(self, uri: SipUri) -> bool:
        return uri.addr == self.endpoint.addr

    def _reply(self, req: SipRequest, code: int, reason: str = "") -> None:
        if req.method == SipMethod.ACK:
            return
        resp = build_response(req, code, reason)
        self.endpoint.send_message(resp, req.top_via.response_addr)

    def prepare_forward(self, req: SipRequest, target: SipUri, branch: str, *,
                        record_route: bool) -> SipRequest:
        fwd = replace(req, uri=target)
        fwd = fwd.with_header("Max-Forwards", str((req.max_forwards or 70) - 1))
        fwd = fwd.prepend_header("Via", self.endpoint.via(transport_of(target), branch))
        if record_route:
            fwd = fwd.prepend_header("Record-Route", self.record_route)
        if fwd.has_header("Proxy-Authorization"):
            fwd = fwd.without_header("Proxy-Authorization")
        return fwd

    def _next_hop(self, req: SipRequest) -> tuple[SipUri, Addr]:
        routes = req.header_values("Route")
        if routes:
            uri = route_uri(routes[0])
            return uri, uri.addr
        return req.uri, req.uri.addr

    def _pop_own_route(self, req: SipRequest) -> SipRequest:
        while True:
            top = req.header("Route")
            if top is None:
                return req
            try:
                uri = route_uri(top)
            except MalformedUri:
                return req
            if not self._is_self(uri):
                return req
            req = req.drop_first("Route")

    # TransactionUser -------------------------------------------------------

    def on_request(self, req: SipRequest, source: Addr, transport: str) -> None:
        reject = sanity_check(req, self.cfg)
        if reject is not None:
            self._reply(req, reject.status.code)
            return
        req = self._pop_own_route(req)
        try:
            if req.method == SipMethod.REGISTER:
                tx = self.endpoint.create_server_tx(req, source, transport)
                tx.respond(self.registrar.handle_register(req, self.now()))
            elif req.method == SipMethod.CANCEL:
                self._reply(req, 481)
            elif req.to_tag is not None:
                self._relay_in_dialog(req, source, transport)
            elif req.method == SipMethod.INVITE:
                self._handle_invite(req, source, transport)
            elif req.method == SipMethod.OPTIONS and req.uri.user is None:
                self._reply(req, 200)
            else:
                self._forward_stateless(req)
        except (ParseError, MalformedUri, MalformedSdp) as exc:
            log.info("proxy: bad request %s: %s", req.method, exc)
            self._reply(req, 400)

    def on_ack(self, req: SipRequest, source: Addr) -> None:
        reject = sanity_check(req, self.cfg)
        if reject is not None:
            return
        req = self._pop_own_route(req)
        record = self.dialogs.get(req.call_id)
        if record is not None and record.strip_ack_body and req.body:
            record.strip_ack_body = False
            req = req.with_body(b"")
        uri, dest = self._next_hop(req)
        if self._is_self(uri):
            return
        branch = self._stateless_branch(req)
        fwd = self.prepare_forward(req, req.uri, branch, record_route=False)
        self.endpoint.stateless_forward(fwd, dest, transport_of(uri))

    def on_cancel(self, invite_tx: ServerTransaction, cancel: SipRequest) -> None:
        call = self.calls.get((invite_tx.request.call_id, invite_tx.key.branch))
        if call is not None:
            call.caller_cancelled()
        elif invite_tx.state == State.PROCEEDING:
            invite_tx.respond(build_response(invite_tx.request, 487))

    def on_stray_response(self, resp: SipResponse, source: Addr) -> None:
        via = resp.top_via
        if via is None or (via.host, via.port) != self.endpoint.addr:
            return
        owner = self.branch_owner.get(via.branch or "")
        if owner is not None:
            call, branch = owner
            if 200 <= resp.code < 300 and branch is not call.winner:
                self.release_loser(resp, branch)
                return
        rest = resp.drop_first("Via")
        nxt = rest.top_via
        if nxt is None:
            return
        self.endpoint.stateless_forward(rest, nxt.response_addr, nxt.transport)

    # INVITE ----------------------------------------------------------------

    def _handle_invite(self, req: SipRequest, source: Addr, transport: str) -> None:
        previous = self.recent.get(req.branch or "")
        if previous is not None:
            # retransmission after our transaction already finished
            last = previous.tx.last_response
            if last is not None:
                self.endpoint.send_message(last, previous.tx.reply_addr, transport)
            return
        self.store.reload_users()
        tx = self.endpoint.create_server_tx(req, source, transport)
        trusted = self.cfg.is_trusted(source[0])
        caller = self.store.subscriber(req.from_addr.uri.user)
        if not trusted and self.cfg.authenticate_invites:
            if caller is None:
                tx.respond(build_response(req, 403))
                return
            denied = self.registrar.check(req, caller, self.now(), proxy=True)
            if denied is not None:
                tx.respond(denied)
                return
        tx.respond(build_response(req, 100))
        decision = route(req, self.store, self.cfg, self.now(), caller, trusted=trusted)
        callee = f"sip:{req.uri.user}@{self.cfg.domain}" if req.uri.user else str(req.uri)
        call = ProxyCall(self, tx, req, req.from_addr.uri.aor(), callee)
        key = (req.call_id, req.branch)
        self.calls[key] = call
        self.recent[req.branch] = call
        life = self.endpoint.timers.tx_lifetime

        def forget():
            self.calls.pop(key, None)
            self.recent.pop(req.branch, None)

        self.endpoint.clock.call_later(max(life, self.cfg.no_answer_timeout) + life, forget)
        log.info("proxy: %s -> %s routed %s", call.caller, req.uri.user,
                 type(decision).__name__)
        call.start(decision)

    def call_answered(self, call: ProxyCall, branch: Branch, resp: SipResponse) -> None:
        record = DialogRecord(
            call_id=call.req.call_id,
            caller=call.caller,
            callee=call.callee,
            start=call.start_time,
            answer=self.now(),
            internal=call.internal and not branch.feature,
            caller_tag=call.req.from_tag or "",
            callee_tag=resp.to_tag or "",
        )
        offer = _parse_body(call.req.body)
        if offer is not None:
            record.sdp[record.caller_tag] = offer
        answer = _parse_body(resp.body)
        if answer is not None:
            record.sdp[record.callee_tag] = answer
        self.dialogs[record.call_id] = record

    def call_failed(self, call: ProxyCall, code: int) -> None:
        end = self.now()
        self.cdr.append(account({
            "call_id": call.req.call_id,
            "caller": call.caller,
            "callee": call.callee,
            "start": _ms(call.start_time),
            "end": max(_ms(end), _ms(call.start_time)),
            "final_code": code,
            "cancelled": call.cancelled,
        }))

    def release_loser(self, resp: SipResponse, branch: Branch) -> None:
        """ACK then BYE a 2xx that lost the fork race."""
        contact = resp.contact
        target = contact.uri if contact else branch.uri
        num = resp.cseq[0]
        base = [
            HeaderField("Max-Forwards", "70"),
            HeaderField("From", resp.header("From")),
            HeaderField("To", resp.header("To")),
            HeaderField("Call-ID", resp.call_id),
        ]
        transport = transport_of(target)
        ack = SipRequest(SipMethod.ACK, target, tuple(
            [HeaderField("Via", self.endpoint.via(transport))] + base
            + [HeaderField("CSeq", f"{num} ACK")]))
        self.endpoint.send_message(ack, target.addr, transport)
        key = (resp.call_id, resp.to_tag or "")
        if key in self.pending_bye:
            return
        self.pending_bye.add(key)
        bye = SipRequest(SipMethod.BYE, target, tuple(
            [HeaderField("Via", self.endpoint.via(transport))] + base
            + [HeaderField("CSeq", f"{num + 1} BYE")]))
        self.endpoint.create_client_tx(bye, target.addr, lambda r: None, transport=transport)

    # in-dialog ---------------------------------------------------------------

    def _relay_in_dialog(self, req: SipRequest, source: Addr, transport: str,
                         body_override: bytes | None = None) -> None:
        uri, dest = self._next_hop(req)
        if self._is_self(uri):
            self._reply(req, 404)
            return
        record = self.dialogs.get(req.call_id)
        if req.method == SipMethod.INVITE and record is not None and record.internal \
                and self.cfg.b2bua_addr is not None:
            if self._intercept_hold(req, source, transport, record):
                return
        tx = self.endpoint.create_server_tx(req, source, transport)
        self._relay_with_tx(tx, req, uri, dest, record, body_override)

    def _relay_with_tx(self, tx: ServerTransaction, req: SipRequest, uri: SipUri, dest: Addr,
                       record: DialogRecord | None, body_override: bytes | None = None) -> None:
        fwd = self.prepare_forward(req, req.uri, new_branch(), record_route=False)
        if body_override is not None:
            fwd = fwd.with_body(body_override)

        def on_response(resp: SipResponse) -> None:
            if resp.code == 100:
                return
            tx.respond(resp.drop_first("Via"))
            if resp.code < 200 or record is None:
                return
            if req.method == SipMethod.BYE:
                self._dialog_ended(record)
            elif req.method == SipMethod.INVITE and resp.code < 300:
                sdp = _parse_body(resp.body)
                if sdp is not None:
                    record.sdp[resp.to_tag or ""] = sdp
                offer = _parse_body(req.body)
                if offer is not None and not offer.is_hold:
                    record.sdp[req.from_tag or ""] = offer

        self.endpoint.create_client_tx(fwd, dest, on_response, transport=transport_of(uri))

    def _dialog_ended(self, record: DialogRecord) -> None:
        if record.ended:
            return
        record.ended = True
        self._stop_moh(record)
        end = self.now()
        self.cdr.append(account({
            "call_id": record.call_id,
            "caller": record.caller,
            "callee": record.callee,
            "start": _ms(record.start),
            "answer": _ms(record.answer),
            "end": _ms(end),
            "final_code": 200,
        }))
        life = self.endpoint.timers.tx_lifetime
        self.endpoint.clock.call_later(life, lambda: self.dialogs.pop(record.call_id, None))

    # hold handling for calls between two phones ----------------------------

    def _intercept_hold(self, req: SipRequest, source: Addr, transport: str,
                        record: DialogRecord) -> bool:
        offer = _parse_body(req.body)
        holding = not req.body or (offer is not None and offer.is_hold)
        if not holding:
            if record.moh is not None:
                self._stop_moh(record)
            return False
        if record.moh is not None:
            return False
        sender = req.from_tag or ""
        held = record.sdp.get(record.peer_tag(sender))
        if held is None:
            return False
        tx = self.endpoint.create_server_tx(req, source, transport)
        tx.respond(build_response(req, 100))
        self._start_moh(record, held, lambda moh: self._forward_hold(tx, req, record, moh))
        return True

    def _forward_hold(self, tx: ServerTransaction, req: SipRequest, record: DialogRecord,
                      moh: SdpBody | None) -> None:
        uri, dest = self._next_hop(req)
        if moh is None:
            self._relay_with_tx(tx, req, uri, dest, record)
            return
        sender = req.from_tag or ""
        base = _parse_body(req.body) or record.sdp.get(sender) or moh
        rewritten = replace(
            base.bumped(),
            connection_address=moh.connection_address,
            media_port=moh.media_port,
            direction=Direction.SENDONLY,
        )
        if not req.body:
            record.strip_ack_body = True
        self._relay_with_tx(tx, req, uri, dest, record, serialize_sdp(rewritten))

    def _start_moh(self, record: DialogRecord, held: SdpBody, done) -> None:
        cfg = self.cfg
        b2bua = cfg.b2bua_addr
        target = SipUri(b2bua[0], cfg.moh_ext, b2bua[1])
        host, port = self.endpoint.addr
        me = SipUri(host, "moh", port)
        offer = replace(held, direction=Direction.RECVONLY)
        invite = SipRequest(SipMethod.INVITE, target, (
            HeaderField("Via", self.endpoint.via()),
            HeaderField("Max-Forwards", "70"),
            HeaderField("From", f"<{me}>;tag={new_tag()}"),
            HeaderField("To", f"<{target}>"),
            HeaderField("Call-ID", new_call_id(host)),
            HeaderField("CSeq", "1 INVITE"),
            HeaderField("Contact", f"<{me}>"),
            HeaderField("Content-Type", "application/sdp"),
        ), serialize_sdp(offer))

        def on_response(resp: SipResponse) -> None:
            if resp.code < 200:
                return
            if resp.code >= 300:
                done(None)
                return
            dialog = Dialog.as_uac(invite, resp)
            ack = dialog.ack(self.endpoint, 1)
            self.endpoint.send_message(ack, dialog.next_hop())
            media = _parse_body(resp.body)
            if record.ended or media is None:
                self._bye(dialog)
                done(None)
                return
            record.moh = MohLeg(dialog, media)
            done(media)

        self.endpoint.create_client_tx(invite, b2bua, on_response)

    def _stop_moh(self, record: DialogRecord) -> None:
        if record.moh is not None:
            self._bye(record.moh.dialog)
            record.moh = None

    def _bye(self, dialog: Dialog) -> None:
        bye = dialog.new_request(self.endpoint, SipMethod.BYE)
        self.endpoint.create_client_tx(bye, dialog.next_hop(), lambda r: None)

    # stateless path ----------------------------------------------------------

    def _stateless_branch(self, req: SipRequest) -> str:
        seed = f"{req.branch}|{req.uri}|{req.method.value}"
        return f"{STATELESS_BRANCH}{hashlib.md5(seed.encode()).hexdigest()[:16]}"

    def _forward_stateless(self, req: SipRequest) -> None:
        """Forward out-of-dialog non-INVITE traffic without keeping any state."""
        uri, dest = self._next_hop(req)
        target = req.uri
        if self._is_self(uri) or req.uri.host == self.cfg.domain:
            bindings = self.store.lookup(SipUri(self.cfg.domain, req.uri.user or ""), self.now())
            if not bindings:
                self._reply(req, 404)
                return
            target = bindings[0].contact
            uri, dest = target, target.addr
        fwd = self.prepare_forward(req, target, self._stateless_branch(req), record_route=False)
        self.endpoint.stateless_forward(fwd, dest, transport_of(uri))


__all__ = ["DialogRecord", "ProxyCall", "ProxyServer"]
