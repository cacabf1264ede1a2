"""Site-level operations: provisioning, logging, verification, ceremonies.

A site is a directory::

    config          canonical JSON: public key, devices, anchor sink
    plan            canonical JSON key-fragmentation plan (public)
    store.vlst      the hash-chained store
    heads/          default anchor sink
    ceremonies/     ceremony state files (share references, never key bytes)

Store payloads start with a type byte: ``0x01`` is an encrypted
:class:`LogEvent` record, ``0x02`` is a plaintext audit event about key
generation, ceremonies or decryption.
"""

from __future__ import annotations

import contextlib
import enum
import fcntl
import hashlib
import logging
import os
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping

from . import canonical
from .envelope import (
    PRODUCTION_GROUP,
    EncryptedRecord,
    GroupParams,
    PrivateKey,
    PublicKey,
    decrypt_record,
    encrypt_record,
    keygen,
)
from .errors import (
    CeremonyError,
    CryptoError,
    IntegrityError,
    PolicyUnsatisfiedError,
    SiteError,
    StoreError,
)
from .field import PrimeField, production_field
from .policy import (
    Ceremony,
    CeremonyStatus,
    KeyFragmentationPlan,
    KeyHandle,
    Policy,
    fragment_key,
    reconstruct_key,
)
from .sharing import Share
from .store import ChainEntry, ChainStore, StoreHead, anchor_head, latest_anchor

log = logging.getLogger(__name__)

SITE_FORMAT = "vaultlog-site/1"
EVENT_FORMAT = "vaultlog-event/1"
DEFAULT_SITE = "./vaultlog-site"

PAYLOAD_RECORD = 0x01
PAYLOAD_AUDIT = 0x02

# Keys that must never appear in a site config.
_PRIVATE_KEYS = frozenset({"x", "private", "private_key", "secret", "payload", "shares"})


class Action(str, enum.Enum):
    LOGIN = "login"
    LOGOUT = "logout"
    OPERATION = "operation"
    CUSTOM = "custom"


@dataclass(frozen=True)
class LogEvent:
    event_id: str
    device_id: str
    user_ref: str
    action: Action
    detail: str
    occurred_at: int

    def __post_init__(self) -> None:
        if not self.device_id:
            raise SiteError("device_id must not be empty")
        if not self.user_ref:
            raise SiteError("user_ref must not be empty")
        if not isinstance(self.action, Action):
            object.__setattr__(self, "action", Action(self.action))

    def to_dict(self) -> dict:
        return {
            "action": self.action.value,
            "detail": self.detail,
            "device_id": self.device_id,
            "event_id": self.event_id,
            "format": EVENT_FORMAT,
            "occurred_at": self.occurred_at,
            "user_ref": self.user_ref,
        }

    def to_bytes(self) -> bytes:
        return canonical.dump_bytes(self.to_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> LogEvent:
        try:
            d = canonical.loads(data)
            if d.get("format") != EVENT_FORMAT:
                raise SiteError("unknown event format")
            return cls(
                d["event_id"], d["device_id"], d["user_ref"],
                Action(d["action"]), d["detail"], int(d["occurred_at"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SiteError(f"malformed event: {exc}") from exc


@dataclass(frozen=True)
class DecryptResult:
    events: list[tuple[int, LogEvent]]
    failures: list[tuple[int, str]]
    audit_entry: ChainEntry


def _scan_for_private(obj, where: str = "config") -> None:
    if isinstance(obj, Mapping):
        for key, value in obj.items():
            if key in _PRIVATE_KEYS:
                raise SiteError(f"{where} contains private material under {key!r}")
            _scan_for_private(value, f"{where}.{key}")
    elif isinstance(obj, list):
        for i, value in enumerate(obj):
            _scan_for_private(value, f"{where}[{i}]")


def load_config(path: str | os.PathLike) -> dict:
    try:
        cfg = canonical.loads(Path(path).read_text())
    except OSError as exc:
        raise StoreError(f"cannot read config: {exc}") from exc
    except ValueError as exc:
        raise SiteError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict) or cfg.get("format") != SITE_FORMAT:
        raise SiteError("not a vaultlog site config")
    _scan_for_private(cfg)
    return cfg


def _write_atomic(path: Path, data: bytes, mode: int = 0o644) -> None:
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class Site:
    """Handle on a site directory.

    ``rng`` and ``clock`` are injectable so scripted sessions are
    reproducible; production uses ``SystemRandom`` and wall-clock time.
    """

    def __init__(
        self,
        root: str | os.PathLike = DEFAULT_SITE,
        *,
        config_path: str | os.PathLike | None = None,
        rng: random.Random | None = None,
        clock: Callable[[], float] | None = None,
    ):
        self.root = Path(root)
        self.config_path = Path(config_path) if config_path else self.root / "config"
        self.rng = rng if rng is not None else random.SystemRandom()
        self.clock = clock if clock is not None else time.time
        if not self.config_path.exists():
            raise SiteError(f"no site at {self.root} (run init first)")
        self.config = load_config(self.config_path)
        self.store = ChainStore(self.root / self.config["store"])

    # -- provisioning ------------------------------------------------------

    @classmethod
    def init(
        cls,
        root: str | os.PathLike = DEFAULT_SITE,
        *,
        anchor: str | None = None,
        rng: random.Random | None = None,
        clock: Callable[[], float] | None = None,
    ) -> Site:
        root = Path(root)
        if (root / "config").exists() or (root / "store.vlst").exists():
            raise SiteError(f"site already exists at {root}")
        try:
            root.mkdir(parents=True, exist_ok=True)
            (root / "heads").mkdir(exist_ok=True)
            (root / "ceremonies").mkdir(exist_ok=True)
            ChainStore.create(root / "store.vlst")
        except OSError as exc:
            raise StoreError(f"cannot create site: {exc}") from exc
        cfg = {
            "anchor": anchor or "heads",
            "devices": {},
            "format": SITE_FORMAT,
            "plan": None,
            "public_key": None,
            "store": "store.vlst",
        }
        _write_atomic(root / "config", canonical.dump_bytes(cfg))
        return cls(root, rng=rng, clock=clock)

    def _save_config(self) -> None:
        _scan_for_private(self.config)
        _write_atomic(self.config_path, canonical.dump_bytes(self.config))

    @property
    def public_key(self) -> PublicKey:
        pk = self.config.get("public_key")
        if pk is None:
            raise SiteError("site has no key yet (run keygen)")
        return PublicKey.from_dict(pk)

    @property
    def plan(self) -> KeyFragmentationPlan:
        name = self.config.get("plan")
        if name is None:
            raise SiteError("site has no fragmentation plan yet (run keygen)")
        try:
            return KeyFragmentationPlan.loads((self.root / name).read_text())
        except OSError as exc:
            raise StoreError(f"cannot read plan: {exc}") from exc

    def keygen_and_fragment(
        self,
        policy: Policy,
        out_dir: str | os.PathLike,
        *,
        group: GroupParams = PRODUCTION_GROUP,
        field: PrimeField | None = None,
    ) -> dict[str, dict]:
        """Generate the site keypair, fragment the private key, write share files.

        Returns the manifest: participant -> {file, policy_path, share_id}.
        Only the public key and the plan stay in the site directory.
        """
        if self.config.get("public_key") is not None:
            raise SiteError("site already has a key; re-keying needs a new site")
        out = Path(out_dir)
        if out.exists() and any(out.iterdir()):
            raise SiteError(f"share output directory {out} is not empty")
        field = field or production_field()
        pair = keygen(group, self.rng)
        public = pair.public
        secret = bytearray(pair.private.to_secret_bytes())
        try:
            plan, shares = fragment_key(bytes(secret), policy, field, self.rng)
        finally:
            for i in range(len(secret)):
                secret[i] = 0
            del pair
        manifest: dict[str, dict] = {}
        try:
            out.mkdir(parents=True, exist_ok=True)
            for who, share in shares.items():
                dest = out / f"{who}.share"
                _write_atomic(dest, share.dumps().encode("ascii"), mode=0o600)
                manifest[who] = {
                    "file": str(dest),
                    "policy_path": share.policy_path,
                    "share_id": share.share_id,
                }
        except OSError as exc:
            raise StoreError(f"cannot write share files: {exc}") from exc
        shares.clear()
        _write_atomic(self.root / "plan", plan.dumps().encode("ascii"))
        self.config["plan"] = "plan"
        self.config["public_key"] = public.to_dict()
        self._save_config()
        self._audit("keygen", key_id=public.key_id.hex(), share_set_id=plan.share_set_id)
        return manifest

    def register_device(self, device_id: str, **meta: str) -> None:
        if not device_id:
            raise SiteError("device id must not be empty")
        if device_id in self.config["devices"]:
            raise SiteError(f"device {device_id!r} already registered")
        self.config["devices"][device_id] = {"registered_at": int(self.clock()), **meta}
        self._save_config()

    # -- logging -----------------------------------------------------------

    def _append(self, kind: int, body: bytes) -> ChainEntry:
        return self.store.append(bytes([kind]) + body, int(self.clock()))

    def _audit(self, kind: str, **detail) -> ChainEntry:
        return self._append(
            PAYLOAD_AUDIT,
            canonical.dump_bytes({"at": int(self.clock()), "event": kind, **detail}),
        )

    def log_event(
        self, device_id: str, user_ref: str, action: Action | str, detail: str = ""
    ) -> ChainEntry:
        if device_id not in self.config["devices"]:
            raise SiteError(f"device {device_id!r} is not registered")
        event = LogEvent(
            self.rng.randbytes(16).hex(), device_id, user_ref,
            Action(action), detail, int(self.clock()),
        )
        record = encrypt_record(self.public_key, event.to_bytes(), self.rng)
        return self._append(PAYLOAD_RECORD, record.to_bytes())

    # -- verification ------------------------------------------------------

    def _anchor_sink(self) -> str:
        sink = self.config.get("anchor") or "heads"
        if sink.startswith(("http://", "https://")) or os.path.isabs(sink):
            return sink
        return str(self.root / sink)

    def latest_anchor(self) -> StoreHead | None:
        sink = self._anchor_sink()
        if sink.startswith(("http://", "https://")):
            return None
        return latest_anchor(sink)

    def verify(self, start: int = 0, stop: int | None = None):
        return self.store.verify_range(start, stop, expected_head=self.latest_anchor())

    def head(self) -> StoreHead:
        return self.store.export_head()

    def anchor(self) -> tuple[StoreHead, bool]:
        head = self.head()
        return head, anchor_head(head, self._anchor_sink())

    # -- ceremonies --------------------------------------------------------

    def _ceremony_file(self, ceremony_id: str) -> Path:
        if not ceremony_id or not all(c in "0123456789abcdef" for c in ceremony_id):
            raise CeremonyError(f"bad ceremony id {ceremony_id!r}")
        return self.root / "ceremonies" / f"{ceremony_id}.json"

    def _on_ceremony_event(self, event: dict) -> None:
        self._append(PAYLOAD_AUDIT, canonical.dump_bytes({**event, "event": "ceremony_" + event["event"]}))

    def open_ceremony(self) -> Ceremony:
        ceremony = Ceremony.open(
            self.plan, rng=self.rng, clock=self.clock, on_event=self._on_ceremony_event
        )
        self._save_ceremony(ceremony, {})
        _write_atomic(self.root / "ceremonies" / "current", ceremony.ceremony_id.encode() + b"\n")
        return ceremony

    def current_ceremony_id(self) -> str:
        try:
            return (self.root / "ceremonies" / "current").read_text().strip()
        except OSError as exc:
            raise CeremonyError("no ceremony has been opened") from exc

    def _save_ceremony(self, ceremony: Ceremony, sources: dict[str, dict]) -> None:
        state = {**ceremony.state(), "sources": sources}
        _write_atomic(self._ceremony_file(ceremony.ceremony_id), canonical.dump_bytes(state))

    def _read_state(self, ceremony_id: str) -> dict:
        try:
            return canonical.loads(self._ceremony_file(ceremony_id).read_text())
        except OSError as exc:
            raise CeremonyError(f"unknown ceremony {ceremony_id}") from exc

    def load_ceremony(self, ceremony_id: str, *, with_shares: bool = False) -> tuple[Ceremony, dict]:
        """Rebuild a ceremony from its state file.

        With ``with_shares`` the referenced share files are re-read and
        checked against the digests recorded at submission time.
        """
        state = self._read_state(ceremony_id)
        plan = self.plan
        if state["share_set_id"] != plan.share_set_id:
            raise CeremonyError("ceremony belongs to a different key plan")
        ceremony = Ceremony(plan, ceremony_id, self.clock, self._on_ceremony_event)
        sources = state.get("sources", {})
        if with_shares:
            for share_id, src in sorted(sources.items()):
                text = self._read_share_file(src["file"])
                if hashlib.sha256(text).hexdigest() != src["sha256"]:
                    raise IntegrityError(f"share file for {share_id} changed since submission")
                ceremony.restore(text)
        ceremony.status = CeremonyStatus(state["status"])
        return ceremony, sources

    @staticmethod
    def _read_share_file(path: str | os.PathLike) -> bytes:
        try:
            return Path(path).read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read share file {path}: {exc}") from exc

    def submit_share(self, ceremony_id: str, share_file: str | os.PathLike) -> CeremonyStatus:
        ceremony, sources = self.load_ceremony(ceremony_id, with_shares=True)
        text = self._read_share_file(share_file)
        share = Share.loads(text)
        status = ceremony.submit(text)
        sources[share.share_id] = {
            "file": str(Path(share_file).resolve()),
            "sha256": hashlib.sha256(text).hexdigest(),
        }
        self._save_ceremony(ceremony, sources)
        return status

    def ceremony_status(self, ceremony_id: str) -> dict:
        state = self._read_state(ceremony_id)
        state.pop("sources", None)
        return state

    def _verify_key(self, key: bytes) -> None:
        PrivateKey.from_secret_bytes(self.public_key, key)

    def finish_ceremony(self, ceremony_id: str) -> tuple[Ceremony, KeyHandle]:
        ceremony, sources = self.load_ceremony(ceremony_id, with_shares=True)
        handle = ceremony.finish(verify=self._verify_key)
        self._save_ceremony(ceremony, sources)
        return ceremony, handle

    def unlock(self, ceremony_id: str) -> tuple[Ceremony, KeyHandle]:
        """Re-derive the key of an already reconstructed ceremony (CLI path)."""
        ceremony, _ = self.load_ceremony(ceremony_id, with_shares=True)
        if ceremony.status is CeremonyStatus.OPEN:
            raise PolicyUnsatisfiedError("ceremony quorum not reached; nothing to decrypt with")
        if ceremony.status is not CeremonyStatus.RECONSTRUCTED:
            raise CeremonyError(f"ceremony is {ceremony.status.value}, not reconstructed")
        key = reconstruct_key(ceremony.plan, ceremony.submitted.values())
        self._verify_key(key)
        ceremony.handle = KeyHandle(key)
        return ceremony, ceremony.handle

    def abort_ceremony(self, ceremony_id: str, reason: str = "") -> None:
        ceremony, _ = self.load_ceremony(ceremony_id)
        ceremony.abort(reason)
        self._save_ceremony(ceremony, {})

    # -- decryption --------------------------------------------------------

    def decrypt_log(
        self,
        start: int,
        stop: int,
        ceremony: Ceremony,
        *,
        operator: str = "",
    ) -> DecryptResult:
        """Decrypt records in ``start <= seq < stop`` using a reconstructed key.

        The whole chain is verified first; an audit entry recording the
        ceremony and range is appended before any plaintext is returned.
        """
        if ceremony.status is not CeremonyStatus.RECONSTRUCTED or ceremony.handle is None:
            raise CeremonyError("decryption needs a reconstructed ceremony")
        report = self.verify()
        if not report.intact:
            raise IntegrityError(f"chain verification failed: {report.summary()}")
        if not 0 <= start <= stop <= self.store.count:
            raise StoreError(f"invalid range {start}..{stop} (count {self.store.count})")
        private = PrivateKey.from_secret_bytes(self.public_key, ceremony.handle.material())
        events: list[tuple[int, LogEvent]] = []
        failures: list[tuple[int, str]] = []
        for entry in self.store.entries(start, stop):
            if not entry.payload or entry.payload[0] != PAYLOAD_RECORD:
                continue
            try:
                record = EncryptedRecord.from_bytes(entry.payload[1:])
                events.append((entry.seq, LogEvent.from_bytes(decrypt_record(private, record))))
            except (CryptoError, SiteError) as exc:
                failures.append((entry.seq, str(exc)))
        del private
        audit = self._audit(
            "decrypt",
            ceremony_id=ceremony.ceremony_id,
            failures=len(failures),
            operator=operator,
            participants=sorted(p for p, _ in ceremony.submitted),
            range=[start, stop],
            records=len(events),
        )
        return DecryptResult(events, failures, audit)

    # -- locking -----------------------------------------------------------

    @contextlib.contextmanager
    def locked(self) -> Iterator[None]:
        with open(self.root / ".lock", "a+") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                yield
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)


def audit_event(entry: ChainEntry) -> dict | None:
    """Parse an audit payload, or None for encrypted records."""
    if entry.payload[:1] == bytes([PAYLOAD_AUDIT]):
        return canonical.loads(entry.payload[1:])
    return None

