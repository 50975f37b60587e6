"""Network shim: a send hook that drops, delays, partitions and records datagrams.

Every actor in a scenario owns its own loopback address, so the shim can map
any datagram back to the actors on either end.
"""

from __future__ import annotations

import asyncio
import hashlib
import random
from dataclasses import dataclass, field

from ..media.rtp import HEADER_SIZE
from ..net import Addr, UdpSocket


@dataclass(frozen=True)
class Datagram:
    t: float
    src: Addr
    dst: Addr
    data: bytes
    delivered: bool

    @property
    def is_rtp(self) -> bool:
        # SIP text starts with an ASCII letter, never with version bits 10
        return len(self.data) >= HEADER_SIZE and self.data[0] >> 6 == 2

    @property
    def is_sip(self) -> bool:
        return bool(self.data) and chr(self.data[0]).isalpha()


@dataclass
class LinkRule:
    loss: float = 0.0
    delay: float = 0.0


def _link_seed(seed: int, a: str, b: str, kind: str) -> int:
    digest = hashlib.sha256(f"{seed}:{min(a, b)}:{max(a, b)}:{kind}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class NetShim:
    """Implements the socket send hook.

    Loss is drawn from one RNG per unordered actor pair and traffic kind,
    seeded from the run seed. Signalling and media draw separately so the
    SIP drop pattern does not depend on how many RTP packets raced past.
    """

    seed: int = 0
    loss: float = 0.0
    delay: float = 0.0
    capture: bool = True
    hosts: dict[str, str] = field(default_factory=dict)  # ip -> actor
    links: dict[frozenset, LinkRule] = field(default_factory=dict)
    partitions: set[frozenset] = field(default_factory=set)
    log: list[Datagram] = field(default_factory=list)
    _rngs: dict[tuple, random.Random] = field(default_factory=dict)
    _t0: float | None = None

    def actor(self, addr: Addr | str) -> str:
        host = addr if isinstance(addr, str) else addr[0]
        return self.hosts.get(host, host)

    def set_link(self, a: str, b: str, *, loss: float | None = None,
                 delay: float | None = None) -> None:
        rule = self.links.setdefault(frozenset((a, b)), LinkRule(self.loss, self.delay))
        if loss is not None:
            rule.loss = loss
        if delay is not None:
            rule.delay = delay

    def partition(self, a: str, b: str) -> None:
        self.partitions.add(frozenset((_base(a), _base(b))))

    def heal(self, a: str | None = None, b: str | None = None) -> None:
        if a is None:
            self.partitions.clear()
        else:
            self.partitions.discard(frozenset((_base(a), _base(b))))

    def _rule(self, link: frozenset) -> LinkRule:
        return self.links.get(link) or LinkRule(self.loss, self.delay)

    def _rng(self, a: str, b: str, kind: str) -> random.Random:
        key = (frozenset((a, b)), kind)
        rng = self._rngs.get(key)
        if rng is None:
            rng = self._rngs[key] = random.Random(_link_seed(self.seed, a, b, kind))
        return rng

    def _partitioned(self, a: str, b: str) -> bool:
        # "b2b" and "b2b.ext" are one actor as far as partitions go
        return frozenset((_base(a), _base(b))) in self.partitions

    def transmit(self, sock: UdpSocket, data: bytes, addr: Addr) -> None:
        loop = asyncio.get_running_loop()
        now = loop.time()
        if self._t0 is None:
            self._t0 = now
        src_actor, dst_actor = self.actor(sock.local_addr), self.actor(addr)
        link = frozenset((src_actor, dst_actor))
        rule = self._rule(link)
        deliver = not self._partitioned(src_actor, dst_actor)
        if deliver and rule.loss > 0:
            kind = "rtp" if data[:1] and data[0] >> 6 == 2 else "sip"
            deliver = self._rng(src_actor, dst_actor, kind).random() >= rule.loss
        if self.capture:
            self.log.append(Datagram(now - self._t0, sock.local_addr, addr, data, deliver))
        if not deliver:
            return
        if rule.delay > 0:
            loop.call_later(rule.delay, sock.raw_send, data, addr)
        else:
            sock.raw_send(data, addr)

    # capture queries -------------------------------------------------------

    def delivered(self) -> list[Datagram]:
        return [d for d in self.log if d.delivered]

    def rtp_to(self, actor: str) -> list[Datagram]:
        return [d for d in self.delivered() if d.is_rtp and _base(self.actor(d.dst)) == actor]

    def traffic_of(self, actor: str) -> list[Datagram]:
        return [d for d in self.log
                if actor in (self.actor(d.src), self.actor(d.dst))]


def _base(actor: str) -> str:
    return actor.split(".", 1)[0]
