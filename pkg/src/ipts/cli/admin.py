"""``ipts-admin``: subscriber, CDR and voicemail administration.

Exit status: 0 success, 1 user error (bad input, duplicate or unknown
extension), 2 system error (unreadable files, I/O failures).
"""

from __future__ import annotations

import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from ..proxy.cdr import read_cdrs
from ..proxy.config import load_proxy_config
from ..registrar import MalformedUserFile, Privilege, Subscriber, format_users, parse_users
from ..sip.digest import ha1
from .common import Parser, UsageError

EXIT_OK, EXIT_USER, EXIT_SYSTEM = 0, 1, 2


class DuplicateExtension(UsageError):
    pass


class UnknownExtension(UsageError):
    pass


def write_atomic(path: Path, text: str) -> None:
    """Replace ``path`` with ``text`` so readers see the old file or the new one, never a mix."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    # make the rename itself durable
    dir_fd = os.open(path.parent, os.O_RDONLY)
    try:
        os.fsync(dir_fd)
    finally:
        os.close(dir_fd)


def read_subscribers(path: Path) -> dict[str, Subscriber]:
    if not path.exists():
        return {}
    return parse_users(path.read_text())


def add_user(path: Path, extension: str, name: str, password: str, privilege: str,
             realm: str = "pbx") -> Subscriber:
    if not extension.isdigit():
        raise UsageError(f"extension {extension!r} is not numeric")
    if "," in name:
        raise UsageError("display name may not contain commas")
    try:
        priv = Privilege(privilege.lower())
    except ValueError:
        raise UsageError(f"privilege must be internal or external, not {privilege!r}") from None
    subs = read_subscribers(path)
    if extension in subs:
        raise DuplicateExtension(f"extension {extension} already exists")
    sub = Subscriber(extension, name, ha1(extension, realm, password), priv)
    subs[extension] = sub
    write_atomic(path, format_users(subs.values()))
    return sub


def delete_user(path: Path, extension: str) -> None:
    subs = read_subscribers(path)
    if extension not in subs:
        raise UnknownExtension(f"no extension {extension}")
    del subs[extension]
    write_atomic(path, format_users(subs.values()))


@dataclass(frozen=True)
class VoicemailEntry:
    received_ms: int
    duration_ms: int
    filename: str


def list_voicemail(vmdir: Path, extension: str) -> list[VoicemailEntry]:
    index = Path(vmdir) / extension / "index"
    if not index.exists():
        return []
    entries = []
    for line in index.read_text().splitlines():
        parts = line.split(",")
        if len(parts) == 3 and parts[0].isdigit() and parts[1].isdigit():
            entries.append(VoicemailEntry(int(parts[0]), int(parts[1]), parts[2]))
    return entries


def _parser() -> Parser:
    parser = Parser(prog="ipts-admin", description="manage subscribers, CDRs and voicemail")
    parser.add_argument("--config", help="proxy INI file; supplies the users and CDR paths")
    parser.add_argument("--users", help="users file (overrides --config)")
    parser.add_argument("--cdr", help="CDR file (overrides --config)")
    parser.add_argument("--vmdir", default="voicemail", help="voicemail root directory")
    parser.add_argument("--realm", help="digest realm (defaults to the configured domain)")
    parser.add_argument("--log-level", default="warning",
                        choices=("debug", "info", "warning", "error"))
    sub = parser.add_subparsers(dest="area", required=True)

    user = sub.add_parser("user").add_subparsers(dest="action", required=True)
    add = user.add_parser("add")
    add.add_argument("ext")
    add.add_argument("name")
    add.add_argument("password")
    add.add_argument("privilege", choices=("internal", "external"))
    delete = user.add_parser("del")
    delete.add_argument("ext")
    user.add_parser("list")

    cdr = sub.add_parser("cdr").add_subparsers(dest="action", required=True)
    cdr_list = cdr.add_parser("list")
    cdr_list.add_argument("--since", type=int, default=None, help="epoch ms lower bound on start")

    vm = sub.add_parser("vm").add_subparsers(dest="action", required=True)
    vm_list = vm.add_parser("list")
    vm_list.add_argument("ext")
    return parser


def _paths(args) -> tuple[Path | None, Path | None, str]:
    users = Path(args.users) if args.users else None
    cdr = Path(args.cdr) if args.cdr else None
    realm = args.realm
    if args.config:
        cfg = load_proxy_config(args.config)
        users = users or cfg.users_file
        cdr = cdr or cfg.cdr_file
        realm = realm or cfg.domain
    return users, cdr, realm or "pbx"


def run(args, out=None) -> None:
    out = out or sys.stdout
    users, cdr_path, realm = _paths(args)
    if args.area == "user":
        if users is None:
            raise UsageError("no users file: pass --users or --config")
        if args.action == "add":
            add_user(users, args.ext, args.name, args.password, args.privilege, realm)
            print(f"added {args.ext}", file=out)
        elif args.action == "del":
            delete_user(users, args.ext)
            print(f"deleted {args.ext}", file=out)
        else:
            for s in sorted(read_subscribers(users).values(), key=lambda s: s.extension):
                print(f"{s.extension}\t{s.display_name}\t{s.privilege.value}", file=out)
    elif args.area == "cdr":
        if cdr_path is None:
            raise UsageError("no CDR file: pass --cdr or --config")
        print("call_id\tcaller\tcallee\tstart_ms\tduration_ms\tdisposition", file=out)
        for c in read_cdrs(cdr_path):
            if args.since is not None and c.start < args.since:
                continue
            print(f"{c.call_id}\t{c.caller_aor}\t{c.callee_uri}\t{c.start}\t"
                  f"{c.duration_ms}\t{c.disposition.value}", file=out)
    else:
        for e in list_voicemail(Path(args.vmdir), args.ext):
            print(f"{e.received_ms}\t{e.duration_ms}\t{e.filename}", file=out)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        run(args)
    except UsageError as exc:
        print(f"ipts-admin: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USER
    except (MalformedUserFile, ValueError, OSError) as exc:
        print(f"ipts-admin: {exc}", file=sys.stderr)
        return EXIT_SYSTEM
    return EXIT_OK
