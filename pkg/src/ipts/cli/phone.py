"""``ipts-phone``: an interactive softphone driven by typed commands."""

from __future__ import annotations

import asyncio
import shlex
import sys
from dataclasses import dataclass
from typing import Callable

from ..ua import InvalidTransition, Phone
from .common import (
    Parser,
    UsageError,
    add_logging,
    add_trace,
    parse_hostport,
    setup_logging,
    sip_tracer,
)

HELP = """commands:
  register <ext> <pass> <proxy[:port]> [<proxy2[:port]>]
  call <digits>      answer      hangup
  hold               unhold      dtmf <digits>
  transfer <ext>     forward <ext>|off
  status             sleep <ms>  help        quit"""


@dataclass(frozen=True)
class Command:
    name: str
    args: tuple[str, ...]


def parse_command(line: str) -> Command | None:
    words = shlex.split(line)
    if not words:
        return None
    return Command(words[0].lower(), tuple(words[1:]))


def _arity(cmd: Command, low: int, high: int | None = None) -> None:
    high = low if high is None else high
    if not low <= len(cmd.args) <= high:
        raise UsageError(f"{cmd.name}: wrong number of arguments (see 'help')")


def execute(phone: Phone, cmd: Command, say: Callable[[str], None]) -> bool | int:
    """Apply one command. Errors are reported, never raised.

    Returns False to quit, or a number of milliseconds to pause (``sleep``,
    handy when commands come from a file).
    """
    try:
        name = cmd.name
        if name in ("quit", "exit"):
            if phone.state.call.value != "Idle":
                phone.hangup()
            return False
        if name == "help":
            say(HELP)
        elif name == "sleep":
            _arity(cmd, 1)
            return int(cmd.args[0])
        elif name == "status":
            st = phone.state
            reg = st.registration.value
            if st.expires_at is not None and reg == "Registered":
                reg += f" (expires in {max(0, int(st.expires_at - phone.now()))} s)"
            say(f"{reg}; call {st.call.value}; forward {st.forward_target or 'off'}")
        elif name == "register":
            _arity(cmd, 3, 4)
            phone.register(cmd.args[0], cmd.args[1], [parse_hostport(p) for p in cmd.args[2:]])
        elif name == "call":
            _arity(cmd, 1)
            phone.call(cmd.args[0])
        elif name == "answer":
            _arity(cmd, 0)
            phone.answer_call()
        elif name == "hangup":
            _arity(cmd, 0)
            phone.hangup()
        elif name == "hold":
            _arity(cmd, 0)
            phone.hold()
        elif name == "unhold":
            _arity(cmd, 0)
            phone.unhold()
        elif name == "dtmf":
            _arity(cmd, 1)
            for digit in cmd.args[0]:
                phone.send_dtmf(digit)
        elif name == "transfer":
            _arity(cmd, 1)
            phone.transfer_to(cmd.args[0])
        elif name == "forward":
            _arity(cmd, 1)
            phone.set_forward(None if cmd.args[0] == "off" else cmd.args[0])
            say(f"forwarding {cmd.args[0]}")
        else:
            say(f"unknown command {name!r} (try 'help')")
    except (InvalidTransition, UsageError, ValueError) as exc:
        say(f"error: {exc}")
    return True


async def _read_lines(queue: asyncio.Queue) -> None:
    loop = asyncio.get_running_loop()
    try:
        reader = asyncio.StreamReader()
        await loop.connect_read_pipe(lambda: asyncio.StreamReaderProtocol(reader), sys.stdin)
        readline = reader.readline
    except ValueError:
        # stdin is a regular file: plain reads never block
        async def readline() -> bytes:
            return sys.stdin.buffer.readline()
    while True:
        line = (await readline()).decode("utf-8", "replace")
        await queue.put(line)
        if not line:
            return


async def _interact(args) -> None:
    phone = Phone(args.host, args.port, name=args.name, domain=args.domain,
                  tone_hz=args.tone, ring_timeout_s=args.ring_timeout)
    if args.trace_sip:
        phone.endpoint.trace = sip_tracer(args.name)

    def say(text: str) -> None:
        print(text, flush=True)

    phone.on_event = say
    await phone.start()
    host, port = phone.addr
    say(f"{args.name} on {host}:{port}; type 'help'")
    queue: asyncio.Queue = asyncio.Queue()
    reader = asyncio.get_running_loop().create_task(_read_lines(queue))
    try:
        while True:
            line = await queue.get()
            if not line:
                break
            try:
                cmd = parse_command(line)
            except ValueError as exc:
                say(f"error: {exc}")
                continue
            if cmd is None:
                continue
            outcome = execute(phone, cmd, say)
            if outcome is False:
                await asyncio.sleep(0.2)  # let a final BYE leave
                break
            if outcome is not True:
                await asyncio.sleep(outcome / 1000)
    finally:
        reader.cancel()
        phone.close()


def main(argv=None) -> int:
    parser = Parser(prog="ipts-phone", description="interactive SIP softphone")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0, help="SIP port (0 picks a free one)")
    parser.add_argument("--name", default="phone")
    parser.add_argument("--domain", default="pbx")
    parser.add_argument("--tone", type=float, default=None,
                        help="send a sine at this frequency instead of silence")
    parser.add_argument("--ring-timeout", type=float, default=30.0)
    add_logging(parser)
    add_trace(parser)
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        asyncio.run(_interact(args))
    except OSError as exc:
        print(f"ipts-phone: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        pass
    return 0
