"""``iptsd`` (proxy and registrar) and ``iptsb`` (B2BUA and media)."""

from __future__ import annotations

import asyncio
import logging
import sys

from ..b2bua import B2bua
from ..b2bua.config import load_b2bua_config
from ..proxy import ProxyServer
from ..proxy.config import load_proxy_config
from ..net import TransportError
from .common import Parser, add_logging, add_trace, setup_logging, sip_tracer, wait_for_stop

log = logging.getLogger(__name__)


def _parser(prog: str, what: str) -> Parser:
    parser = Parser(prog=prog, description=what)
    parser.add_argument("--config", required=True, help="INI configuration file")
    add_logging(parser)
    add_trace(parser)
    return parser


async def _serve_proxy(args) -> None:
    cfg = load_proxy_config(args.config)
    proxy = ProxyServer(cfg, name="iptsd")
    if args.trace_sip:
        proxy.endpoint.trace = sip_tracer("iptsd")
    await proxy.start()
    log.warning("iptsd listening on %s:%d", *proxy.addr)

    def reload() -> None:
        try:
            proxy.reload()
            log.warning("users reloaded: %d subscribers", len(proxy.store.subscribers))
        except (ValueError, OSError) as exc:
            log.error("reload failed, keeping previous users: %s", exc)

    try:
        await wait_for_stop(reload)
    finally:
        proxy.close()


async def _serve_b2bua(args) -> None:
    cfg = load_b2bua_config(args.config)
    b2bua = B2bua(cfg)
    if args.trace_sip:
        b2bua.inside.trace = sip_tracer("iptsb")
        b2bua.outside.trace = sip_tracer("iptsb-ext")
    await b2bua.start()
    log.warning("iptsb listening on %s:%d (public %s:%d)", *b2bua.addr, *b2bua.public_addr)

    def reload() -> None:
        try:
            fresh = load_b2bua_config(args.config)
        except (ValueError, OSError) as exc:
            log.error("reload failed, keeping previous config: %s", exc)
            return
        b2bua.cfg.rules = fresh.rules
        b2bua.cfg.trunks = fresh.trunks
        b2bua.cfg.ivr = fresh.ivr
        log.warning("dialplan reloaded: %d rules", len(fresh.rules))

    try:
        await wait_for_stop(reload)
    finally:
        b2bua.close()


def _run(serve, prog: str, what: str, argv) -> int:
    args = _parser(prog, what).parse_args(argv)
    setup_logging(args.log_level)
    try:
        asyncio.run(serve(args))
    except ValueError as exc:  # config, users file or dialplan problems
        print(f"{prog}: {exc}", file=sys.stderr)
        return 1
    except (TransportError, OSError) as exc:
        print(f"{prog}: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0


def proxy_main(argv=None) -> int:
    return _run(_serve_proxy, "iptsd", "SIP proxy and registrar", argv)


def b2bua_main(argv=None) -> int:
    return _run(_serve_b2bua, "iptsb", "B2BUA with media features", argv)
