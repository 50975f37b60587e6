"""Pieces every command shares: logging flags, SIP tracing, signal-driven shutdown."""

from __future__ import annotations

import argparse
import asyncio
import logging
import signal
import sys
import time
from typing import Callable

from ..net import Addr
from ..sip import SipMessage, SipRequest

LOG_LEVELS = ("debug", "info", "warning", "error")


class UsageError(Exception):
    """Bad command-line input; exit status 1."""


class Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; these tools reserve 2 for system errors
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def add_logging(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--log-level", default="warning", choices=LOG_LEVELS)


def add_trace(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trace-sip", action="store_true",
                        help="print every SIP message sent or received")


def setup_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def parse_hostport(text: str, default_port: int = 5060) -> Addr:
    host, sep, port = text.rpartition(":")
    if not sep:
        return (text, default_port)
    if not port.isdigit():
        raise UsageError(f"bad address {text!r}")
    return (host, int(port))


def sip_tracer(name: str, out=None) -> Callable[[str, SipMessage, Addr], None]:
    """Trace hook printing one line per message in the order they cross the wire."""
    stream = out or sys.stdout

    def trace(direction: str, msg: SipMessage, addr: Addr) -> None:
        stamp = time.strftime("%H:%M:%S") + f".{int(time.time() * 1000) % 1000:03d}"
        arrow = "->" if direction == "send" else "<-"
        if isinstance(msg, SipRequest):
            head = f"{msg.method.value} {msg.uri}"
        else:
            head = f"{msg.code} {msg.status.reason}"
        num, method = msg.cseq
        print(f"{stamp} {name} {arrow} {addr[0]}:{addr[1]} {head} "
              f"[{num} {method.value}] {msg.call_id}", file=stream, flush=True)

    return trace


async def wait_for_stop(on_reload: Callable[[], None] | None = None) -> None:
    """Block until SIGINT/SIGTERM; SIGHUP calls ``on_reload``."""
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        loop.add_signal_handler(sig, stop.set)
    if on_reload is not None:
        loop.add_signal_handler(signal.SIGHUP, on_reload)
    await stop.wait()
