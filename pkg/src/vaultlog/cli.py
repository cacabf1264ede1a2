"""``vlog`` command line.

Exit codes: 0 ok, 1 usage, 2 integrity failure, 3 I/O, 4 policy not
satisfied, 5 crypto failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence, TextIO

from . import canonical
from .envelope import GROUPS, PRODUCTION_GROUP, EncryptedRecord
from .errors import CryptoError, IntegrityError, VaultlogError
from .policy import Policy
from .service import DEFAULT_SITE, PAYLOAD_AUDIT, PAYLOAD_RECORD, Action, Site

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_IO = 3
EXIT_POLICY = 4
EXIT_CRYPTO = 5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with 2, which means tamper here
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vlog", description="Encrypted, tamper-evident audit log.")
    parser.add_argument("--site", default=DEFAULT_SITE, help="site directory (default %(default)s)")
    parser.add_argument("--config", help="site config file (default <site>/config)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init", help="create a new site")
    p.add_argument("--anchor", help="head anchor sink: directory, file or http(s) URL")

    p = sub.add_parser("keygen", help="generate the site key and write share files")
    p.add_argument("--policy", required=True, help="policy file")
    p.add_argument("--out", required=True, help="directory for share files (must be empty)")
    p.add_argument("--group", default=PRODUCTION_GROUP.name, choices=sorted(GROUPS))

    p = sub.add_parser("register-device", help="allow a device to log")
    p.add_argument("device_id")
    p.add_argument("--description", default="")

    p = sub.add_parser("log", help="append an encrypted event")
    p.add_argument("--device", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--action", required=True, choices=[a.value for a in Action])
    p.add_argument("--detail", default="")

    p = sub.add_parser("verify", help="check the hash chain")
    p.add_argument("--from", dest="start", type=int, default=0)
    p.add_argument("--to", dest="stop", type=int, default=None, help="exclusive end")

    p = sub.add_parser("head", help="print (and optionally anchor) the chain head")
    p.add_argument("--anchor", action="store_true")

    p = sub.add_parser("ceremony", help="key reconstruction ceremony")
    csub = p.add_subparsers(dest="ceremony_command", required=True, parser_class=_Parser)
    csub.add_parser("open")
    for name in ("status", "finish", "abort"):
        cp = csub.add_parser(name)
        cp.add_argument("--id", dest="ceremony_id")
    cp = csub.add_parser("submit")
    cp.add_argument("--share", required=True)
    cp.add_argument("--id", dest="ceremony_id")

    p = sub.add_parser("decrypt", help="decrypt a range after a ceremony")
    p.add_argument("--from", dest="start", type=int, default=0)
    p.add_argument("--to", dest="stop", type=int, default=None, help="exclusive end")
    p.add_argument("--id", dest="ceremony_id")
    p.add_argument("--operator", default=os.environ.get("USER", ""))
    p.add_argument("--out", help="write plaintext to this file instead of stdout")

    p = sub.add_parser("export", help="dump the store without decrypting")
    p.add_argument("--format", choices=("text", "binary"), default="text")
    p.add_argument("--out")

    sub.add_parser("serve", help="read JSON events from stdin and log them")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, VaultlogError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_USAGE


class _Cli:
    def __init__(self, args, rng, clock, stdout: TextIO, stderr: TextIO, stdin: TextIO):
        self.args = args
        self.rng = rng
        self.clock = clock
        self.out = stdout
        self.err = stderr
        self.stdin = stdin

    def say(self, *parts) -> None:
        print(*parts, file=self.out)

    def site(self) -> Site:
        return Site(self.args.site, config_path=self.args.config, rng=self.rng, clock=self.clock)

    def run(self) -> int:
        cmd = self.args.command
        if cmd == "init":
            Site.init(self.args.site, anchor=self.args.anchor, rng=self.rng, clock=self.clock)
            self.say(f"initialized site at {self.args.site}")
            return EXIT_OK
        site = self.site()
        with site.locked():
            handler: Callable[[Site], int] = getattr(self, "cmd_" + cmd.replace("-", "_"))
            return handler(site)

    def cmd_keygen(self, site: Site) -> int:
        policy = Policy.loads(Path(self.args.policy).read_text())
        manifest = site.keygen_and_fragment(policy, self.args.out, group=GROUPS[self.args.group])
        self.say(f"key {site.public_key.key_id.hex()} fragmented into {len(manifest)} shares")
        for who, info in sorted(manifest.items()):
            self.say(f"  {who:20s} {info['policy_path']:10s} {info['file']}")
        return EXIT_OK

    def cmd_register_device(self, site: Site) -> int:
        meta = {"description": self.args.description} if self.args.description else {}
        site.register_device(self.args.device_id, **meta)
        self.say(f"registered {self.args.device_id}")
        return EXIT_OK

    def cmd_log(self, site: Site) -> int:
        entry = site.log_event(self.args.device, self.args.user, self.args.action, self.args.detail)
        self.say(f"logged seq {entry.seq}")
        return EXIT_OK

    def cmd_verify(self, site: Site) -> int:
        report = site.verify(self.args.start, self.args.stop)
        self.say(report.summary())
        return EXIT_OK if report.intact else EXIT_INTEGRITY

    def cmd_head(self, site: Site) -> int:
        if self.args.anchor:
            head, ok = site.anchor()
            self.say(str(head))
            if not ok:
                print("warning: head could not be anchored", file=self.err)
        else:
            self.say(str(site.head()))
        return EXIT_OK

    def _ceremony_id(self, site: Site) -> str:
        return getattr(self.args, "ceremony_id", None) or site.current_ceremony_id()

    def cmd_ceremony(self, site: Site) -> int:
        action = self.args.ceremony_command
        if action == "open":
            ceremony = site.open_ceremony()
            self.say(ceremony.ceremony_id)
            return EXIT_OK
        cid = self._ceremony_id(site)
        if action == "submit":
            status = site.submit_share(cid, self.args.share)
            self.say(status.value)
        elif action == "status":
            self.out.write(canonical.dumps(site.ceremony_status(cid)))
        elif action == "finish":
            _, handle = site.finish_ceremony(cid)
            handle.zeroize()
            self.say("reconstructed")
        elif action == "abort":
            site.abort_ceremony(cid, "aborted from cli")
            self.say("aborted")
        return EXIT_OK

    def cmd_decrypt(self, site: Site) -> int:
        cid = self._ceremony_id(site)
        stop = site.store.count if self.args.stop is None else self.args.stop
        ceremony, handle = site.unlock(cid)
        try:
            result = site.decrypt_log(self.args.start, stop, ceremony, operator=self.args.operator)
        finally:
            handle.zeroize()
        lines = [
            canonical.dumps({"event": ev.to_dict(), "seq": seq}) for seq, ev in result.events
        ]
        if self.args.out:
            print(f"warning: writing plaintext events to {self.args.out}", file=self.err)
            Path(self.args.out).write_text("".join(lines))
        else:
            self.out.write("".join(lines))
        for seq, reason in result.failures:
            print(f"seq {seq}: {reason}", file=self.err)
        return EXIT_CRYPTO if result.failures else EXIT_OK

    def cmd_export(self, site: Site) -> int:
        if self.args.format == "binary":
            data = site.store.path.read_bytes()
            if self.args.out:
                Path(self.args.out).write_bytes(data)
            else:
                buf = getattr(self.out, "buffer", None)
                if buf is None:
                    raise IntegrityError("binary export needs --out or a byte stream")
                buf.write(data)
            return EXIT_OK
        lines = []
        for e in site.store.entries():
            kind = e.payload[:1]
            if kind == bytes([PAYLOAD_AUDIT]):
                body = "audit " + e.payload[1:].decode("ascii", "replace").strip()
            elif kind == bytes([PAYLOAD_RECORD]):
                try:
                    rec = EncryptedRecord.from_bytes(e.payload[1:])
                    body = f"record key={rec.key_id.hex()[:16]} bytes={len(rec.ciphertext)}"
                except CryptoError:
                    body = "record <unparseable>"
            else:
                body = f"unknown {len(e.payload)} bytes"
            lines.append(f"{e.seq}\t{e.timestamp}\t{e.prev_hash.hex()}\t{e.entry_hash.hex()}\t{body}\n")
        text = "".join(lines)
        if self.args.out:
            Path(self.args.out).write_text(text)
        else:
            self.out.write(text)
        return EXIT_OK

    def cmd_serve(self, site: Site) -> int:
        """One JSON object per input line: {"device", "user", "action", "detail"}."""
        failures = 0
        for line in self.stdin:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
                entry = site.log_event(
                    msg["device"], msg["user"], msg.get("action", "custom"), msg.get("detail", "")
                )
                self.out.write(canonical.dumps({"seq": entry.seq}))
            except (VaultlogError, KeyError, TypeError, ValueError) as exc:
                failures += 1
                self.out.write(canonical.dumps({"error": str(exc)}))
            self.out.flush()
        return EXIT_OK if not failures else EXIT_USAGE


def main(
    argv: Sequence[str] | None = None,
    *,
    rng=None,
    clock=None,
    stdout: TextIO | None = None,
    stderr: TextIO | None = None,
    stdin: TextIO | None = None,
) -> int:
    """Entry point; ``rng``/``clock`` injection is for scripted, reproducible runs."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"vlog: {exc}", file=stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return _Cli(args, rng, clock, stdout, stderr, stdin or sys.stdin).run()
    except (VaultlogError, OSError) as exc:
        print(f"vlog: {exc}", file=stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
