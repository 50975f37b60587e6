"""Dialog state and a reusable user-agent core.

Softphones, the B2BUA and the simulated trunk all sit on :class:`UaCore`:
it owns the dialog table, answers in-dialog requests it does not care about,
keeps ACKs for retransmitted 2xx responses and drives outgoing INVITEs
(including one digest retry) through :class:`OutgoingInvite`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable

from .net import Addr
from .sip import (
    HeaderField,
    NameAddr,
    SipMethod,
    SipRequest,
    SipResponse,
    SipUri,
    build_response,
    new_call_id,
    new_tag,
    parse_name_addr,
)
from .sip.digest import authorization_header, parse_digest
from .transaction import ServerTransaction, SipEndpoint, State, TransactionUser

log = logging.getLogger(__name__)

Credentials = Callable[[str], "tuple[str, str] | None"]


def route_uri(value: str) -> SipUri:
    return parse_name_addr(value).uri


def transport_of(uri: SipUri) -> str:
    return "TCP" if (uri.param("transport") or "").lower() == "tcp" else "UDP"


@dataclass
class Dialog:
    call_id: str
    local_tag: str
    remote_tag: str
    local_party: NameAddr
    remote_party: NameAddr
    remote_target: SipUri
    local_contact: SipUri
    route_set: tuple[str, ...] = ()
    local_cseq: int = 1
    remote_cseq: int | None = None
    terminated: bool = False
    # free-form slot for whoever owns the dialog
    owner: object = None

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.call_id, self.local_tag, self.remote_tag)

    def next_hop(self) -> Addr:
        if self.route_set:
            return route_uri(self.route_set[0]).addr
        return self.remote_target.addr

    @property
    def transport(self) -> str:
        if self.route_set:
            return transport_of(route_uri(self.route_set[0]))
        return transport_of(self.remote_target)

    def new_request(self, endpoint: SipEndpoint, method: SipMethod | str, *,
                    body: bytes = b"", content_type: str = "application/sdp",
                    headers: tuple[tuple[str, str], ...] = (), cseq: int | None = None
                    ) -> SipRequest:
        method = SipMethod(method)
        if cseq is None:
            self.local_cseq += 1
            cseq = self.local_cseq
        out = [
            HeaderField("Via", endpoint.via(self.transport)),
            HeaderField("Max-Forwards", "70"),
            HeaderField("From", str(self.local_party)),
            HeaderField("To", str(self.remote_party)),
            HeaderField("Call-ID", self.call_id),
            HeaderField("CSeq", f"{cseq} {method.value}"),
        ]
        out.extend(HeaderField("Route", r) for r in self.route_set)
        if method in (SipMethod.INVITE,):
            out.append(HeaderField("Contact", f"<{self.local_contact}>"))
        out.extend(HeaderField(n, v) for n, v in headers)
        if body:
            out.append(HeaderField("Content-Type", content_type))
        return SipRequest(method, self.remote_target, tuple(out), body)

    def ack(self, endpoint: SipEndpoint, invite_cseq: int, body: bytes = b"") -> SipRequest:
        return self.new_request(endpoint, SipMethod.ACK, body=body, cseq=invite_cseq)

    @classmethod
    def as_uac(cls, invite: SipRequest, resp: SipResponse) -> Dialog:
        contact = resp.contact
        routes = tuple(reversed(resp.header_values("Record-Route")))
        return cls(
            call_id=invite.call_id,
            local_tag=invite.from_tag,
            remote_tag=resp.to_tag or "",
            local_party=invite.from_addr,
            remote_party=resp.to_addr,
            remote_target=contact.uri if contact else invite.uri,
            local_contact=invite.contact.uri if invite.contact else invite.from_addr.uri,
            route_set=routes,
            local_cseq=invite.cseq[0],
        )

    @classmethod
    def as_uas(cls, invite: SipRequest, local_tag: str, local_contact: SipUri) -> Dialog:
        contact = invite.contact
        return cls(
            call_id=invite.call_id,
            local_tag=local_tag,
            remote_tag=invite.from_tag or "",
            local_party=invite.to_addr.with_tag(local_tag),
            remote_party=invite.from_addr,
            remote_target=contact.uri if contact else invite.from_addr.uri,
            local_contact=local_contact,
            route_set=tuple(invite.header_values("Record-Route")),
            local_cseq=0,
            remote_cseq=invite.cseq[0],
        )


def answer_with_credentials(req: SipRequest, challenge: SipResponse,
                            credentials: Credentials) -> SipRequest | None:
    """Copy of ``req`` carrying a digest answer, or None when we cannot answer."""
    if challenge.code == 401:
        ask, reply = "WWW-Authenticate", "Authorization"
    elif challenge.code == 407:
        ask, reply = "Proxy-Authenticate", "Proxy-Authorization"
    else:
        return None
    value = challenge.header(ask)
    if value is None:
        return None
    params = parse_digest(value)
    realm, nonce = params.get("realm", ""), params.get("nonce", "")
    creds = credentials(realm)
    if creds is None or not nonce:
        return None
    user, password = creds
    header = authorization_header(user, realm, password, nonce, req.method.value, str(req.uri))
    return req.with_header(reply, header)


class OutgoingInvite:
    """One INVITE from a UAC: provisional/answer/failure callbacks, one auth retry."""

    def __init__(self, core: UaCore, request: SipRequest, dest: Addr, *,
                 on_provisional: Callable[[SipResponse], None] | None = None,
                 on_answer: Callable[[Dialog, SipResponse], None] | None = None,
                 on_failure: Callable[[SipResponse], None] | None = None,
                 credentials: Credentials | None = None,
                 ack_body: Callable[[SipResponse], bytes] | None = None):
        self.core = core
        self.request = request
        self.dest = dest
        self.on_provisional = on_provisional
        self.on_answer = on_answer
        self.on_failure = on_failure
        self.credentials = credentials
        self.ack_body = ack_body
        self.tx = None
        self.dialog: Dialog | None = None
        self.final: SipResponse | None = None
        self.cancelled = False
        self._auth_tried = False

    @property
    def call_id(self) -> str:
        return self.request.call_id

    def start(self) -> OutgoingInvite:
        self.core.outgoing[self.call_id] = self
        self.tx = self.core.endpoint.create_client_tx(
            self.request, self.dest, self._on_response,
            transport=transport_of(self.request.uri),
        )
        return self

    def cancel(self) -> None:
        if self.final is not None or self.cancelled:
            return
        self.cancelled = True
        if self.tx is not None:
            self.tx.cancel()

    def _on_response(self, resp: SipResponse) -> None:
        code = resp.code
        if code < 200:
            if code > 100 and self.on_provisional and not self.cancelled:
                self.on_provisional(resp)
            return
        if code < 300:
            self._on_2xx(resp)
            return
        if code in (401, 407) and not self._auth_tried and self.credentials and not self.cancelled:
            retry = answer_with_credentials(self.request, resp, self.credentials)
            if retry is not None:
                self._auth_tried = True
                num = self.request.cseq[0] + 1
                retry = retry.replace_first("Via", self.core.endpoint.via(
                    transport_of(self.request.uri)))
                retry = retry.with_header("CSeq", f"{num} INVITE")
                self.request = retry
                self.tx = self.core.endpoint.create_client_tx(
                    retry, self.dest, self._on_response, transport=transport_of(retry.uri))
                return
        self.final = resp
        self.core.outgoing.pop(self.call_id, None)
        if self.on_failure:
            self.on_failure(resp)

    def _on_2xx(self, resp: SipResponse) -> None:
        core = self.core
        if self.dialog is not None:
            if resp.to_tag != self.dialog.remote_tag:
                # a second fork answered: confirm then release it
                extra = Dialog.as_uac(self.request, resp)
                core.send_ack(extra, resp)
                core.send_bye(extra)
            return
        self.final = resp
        self.dialog = Dialog.as_uac(self.request, resp)
        core.outgoing.pop(self.call_id, None)
        body = self.ack_body(resp) if self.ack_body else b""
        core.send_ack(self.dialog, resp, body)
        if self.cancelled:
            core.send_bye(self.dialog)
            if self.on_failure:
                self.on_failure(build_response(self.request, 487))
            return
        core.dialogs[self.dialog.key] = self.dialog
        if self.on_answer:
            self.on_answer(self.dialog, resp)


@dataclass
class _Acked:
    ack: SipRequest
    dest: Addr
    transport: str


class UaCore(TransactionUser):
    """Dialog bookkeeping shared by every user agent in the system."""

    def __init__(self, endpoint: SipEndpoint, *, user: str = "ua",
                 credentials: Credentials | None = None):
        self.endpoint = endpoint
        endpoint.tu = self
        self.user = user
        self.credentials = credentials
        self.dialogs: dict[tuple[str, str, str], Dialog] = {}
        self.outgoing: dict[str, OutgoingInvite] = {}
        self._acks: dict[tuple[str, int], _Acked] = {}

    # helpers ---------------------------------------------------------------

    @property
    def contact(self) -> SipUri:
        host, port = self.endpoint.addr
        return SipUri(host, self.user, port)

    def now(self) -> float:
        return self.endpoint.clock.time()

    def invite_request(self, target: SipUri, *, from_uri: SipUri, to_uri: SipUri | None = None,
                       body: bytes = b"", headers: tuple[tuple[str, str], ...] = (),
                       display: str | None = None, call_id: str | None = None,
                       route: tuple[str, ...] = ()) -> SipRequest:
        out = [
            HeaderField("Via", self.endpoint.via(transport_of(target))),
            HeaderField("Max-Forwards", "70"),
            HeaderField("From", str(NameAddr(from_uri, display).with_tag(new_tag()))),
            HeaderField("To", str(NameAddr(to_uri or target.without_params()))),
            HeaderField("Call-ID", call_id or new_call_id(self.endpoint.host)),
            HeaderField("CSeq", "1 INVITE"),
        ]
        out.extend(HeaderField("Route", r) for r in route)
        out.append(HeaderField("Contact", f"<{self.contact}>"))
        out.extend(HeaderField(n, v) for n, v in headers)
        if body:
            out.append(HeaderField("Content-Type", "application/sdp"))
        return SipRequest(SipMethod.INVITE, target, tuple(out), body)

    def send_invite(self, request: SipRequest, dest: Addr, **callbacks) -> OutgoingInvite:
        callbacks.setdefault("credentials", self.credentials)
        return OutgoingInvite(self, request, dest, **callbacks).start()

    def send_ack(self, dialog: Dialog, resp: SipResponse, body: bytes = b"") -> None:
        ack = dialog.ack(self.endpoint, resp.cseq[0], body)
        dest, transport = dialog.next_hop(), dialog.transport
        self._acks[(dialog.call_id, resp.cseq[0])] = _Acked(ack, dest, transport)
        self.endpoint.send_message(ack, dest, transport)
        self.endpoint.clock.call_later(self.endpoint.timers.tx_lifetime,
                                       lambda k=(dialog.call_id, resp.cseq[0]): self._acks.pop(k, None))

    def send_in_dialog(self, dialog: Dialog, method: SipMethod | str,
                       on_response: Callable[[SipResponse], None] | None = None, **kw):
        req = dialog.new_request(self.endpoint, method, **kw)
        return self.endpoint.create_client_tx(
            req, dialog.next_hop(), on_response or (lambda r: None), transport=dialog.transport)

    def send_bye(self, dialog: Dialog, on_response=None):
        dialog.terminated = True
        self.dialogs.pop(dialog.key, None)
        return self.send_in_dialog(dialog, SipMethod.BYE, on_response)

    def reinvite(self, dialog: Dialog, body: bytes,
                 on_response: Callable[[SipResponse], None] | None = None,
                 ack_body: Callable[[SipResponse], bytes] | None = None):
        def handle(resp: SipResponse) -> None:
            if 200 <= resp.code < 300:
                self.send_ack(dialog, resp, ack_body(resp) if ack_body else b"")
            if on_response:
                on_response(resp)

        return self.send_in_dialog(dialog, SipMethod.INVITE, handle, body=body)

    def answer(self, tx: ServerTransaction, dialog: Dialog, body: bytes = b"",
               headers: tuple[tuple[str, str], ...] = ()) -> SipResponse:
        req = tx.request
        resp = build_response(
            req, 200, to_tag=dialog.local_tag, body=body,
            headers=tuple(("Record-Route", r) for r in req.header_values("Record-Route"))
            + (("Contact", f"<{dialog.local_contact}>"),) + headers,
        )
        self.dialogs[dialog.key] = dialog
        self.endpoint.send_2xx(tx, resp, on_ack_timeout=lambda: self._ack_timeout(dialog))
        return resp

    def _ack_timeout(self, dialog: Dialog) -> None:
        if not dialog.terminated:
            log.info("%s: no ACK for 2xx on %s, hanging up", self.endpoint.name, dialog.call_id)
            self.send_bye(dialog)
            self.on_dialog_ended(dialog, "ack-timeout")

    def find_dialog(self, msg) -> Dialog | None:
        # requests from the peer carry our tag in To
        return self.dialogs.get((msg.call_id, msg.to_tag or "", msg.from_tag or ""))

    # TransactionUser -------------------------------------------------------

    def on_request(self, req: SipRequest, source: Addr, transport: str) -> None:
        if req.method == SipMethod.INVITE and req.to_tag is None:
            pending = self.endpoint._pending_2xx.get((req.call_id, req.cseq[0]))
            if pending is not None:
                # caller lost our 2xx
                self.endpoint.send_message(pending.resp, pending.dest, pending.transport)
                return
        tx = self.endpoint.create_server_tx(req, source, transport)
        if req.to_tag is not None:
            dialog = self.find_dialog(req)
            if dialog is None:
                tx.respond(build_response(req, 481))
                return
            if dialog.remote_cseq is not None and req.cseq[0] <= dialog.remote_cseq:
                tx.respond(build_response(req, 500, "Out of Order"))
                return
            dialog.remote_cseq = req.cseq[0]
            if req.method == SipMethod.BYE:
                dialog.terminated = True
                self.dialogs.pop(dialog.key, None)
                tx.respond(build_response(req, 200))
                self.on_dialog_ended(dialog, "bye")
                return
            self.on_in_dialog(dialog, tx, req)
            return
        if req.method == SipMethod.INVITE:
            self.on_invite(tx, req, source)
        elif req.method == SipMethod.OPTIONS:
            tx.respond(build_response(req, 200, headers=(("Allow", ALLOW),)))
        elif req.method == SipMethod.BYE:
            tx.respond(build_response(req, 481))
        else:
            self.on_other(tx, req)

    def on_ack(self, req: SipRequest, source: Addr) -> None:
        dialog = self.find_dialog(req)
        if dialog is not None:
            self.on_dialog_ack(dialog, req)

    def on_stray_response(self, resp: SipResponse, source: Addr) -> None:
        try:
            cseq, method = resp.cseq
        except ValueError:
            return
        if method == SipMethod.INVITE and 200 <= resp.code < 300:
            acked = self._acks.get((resp.call_id, cseq))
            if acked is not None:
                self.endpoint.send_message(acked.ack, acked.dest, acked.transport)

    def on_cancel(self, invite_tx: ServerTransaction, cancel: SipRequest) -> None:
        if invite_tx.state == State.PROCEEDING:
            invite_tx.respond(build_response(invite_tx.request, 487))
            self.on_invite_cancelled(invite_tx)

    # hooks -----------------------------------------------------------------

    def on_invite(self, tx: ServerTransaction, req: SipRequest, source: Addr) -> None:
        tx.respond(build_response(req, 480))

    def on_in_dialog(self, dialog: Dialog, tx: ServerTransaction, req: SipRequest) -> None:
        """Default: accept re-INVITEs without changing media, 200 everything else."""
        if req.method == SipMethod.INVITE:
            self.answer(tx, dialog)
        else:
            tx.respond(build_response(req, 200))

    def on_other(self, tx: ServerTransaction, req: SipRequest) -> None:
        tx.respond(build_response(req, 405, headers=(("Allow", ALLOW),)))

    def on_dialog_ack(self, dialog: Dialog, req: SipRequest) -> None:
        pass

    def on_dialog_ended(self, dialog: Dialog, reason: str) -> None:
        pass

    def on_invite_cancelled(self, tx: ServerTransaction) -> None:
        pass


ALLOW = "INVITE, ACK, CANCEL, BYE, OPTIONS"


def sip_uri_for(user: str, addr: Addr) -> SipUri:
    return SipUri(addr[0], user, addr[1])


def retarget(req: SipRequest, uri: SipUri) -> SipRequest:
    return replace(req, uri=uri)


__all__ = [
    "ALLOW",
    "Dialog",
    "OutgoingInvite",
    "UaCore",
    "answer_with_credentials",
    "retarget",
    "route_uri",
    "sip_uri_for",
    "transport_of",
]
