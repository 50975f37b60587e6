"""Session-border rewriting of SDP towards the public side."""

from __future__ import annotations

import re
from dataclasses import replace

from ..net import Addr
from ..sip import SdpBody


def rewrite_topology(sdp: SdpBody, public_addr: Addr) -> SdpBody:
    """Replace every address in ``sdp`` with the relay's public media address.

    Idempotent: a second rewrite with the same address changes nothing.
    """
    host, port = public_addr
    return replace(sdp, connection_address=host, media_port=port, origin_address=host)


def leaks(data: bytes, internal_hosts) -> list[str]:
    """Internal host strings that appear anywhere in ``data`` as whole addresses."""
    found = []
    for host in internal_hosts:
        pattern = rb"(?<![0-9.])" + re.escape(host.encode()) + rb"(?![0-9])"
        if re.search(pattern, data):
            found.append(host)
    return found
