"""Append-only, hash-chained record store in a single file.

File layout::

    "VLST" | version (1 byte)
    frame*  where frame = BE64 seq | prev_hash (32) | BE64 timestamp
                          | BE64 len | payload | entry_hash (32)

    entry_hash = SHA-256(prev_hash | BE64 seq | BE64 timestamp | BE64 len | payload)

Entry 0 links to 32 zero bytes. There is no update or delete path: the file
is only ever opened for appending, and every append is fsynced before it
is acknowledged. Tampering is detected by :meth:`ChainStore.verify_range`;
deletion of the whole file or of its tail is detected by comparing with a
previously exported :class:`StoreHead`.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .errors import IntegrityError, StoreError

log = logging.getLogger(__name__)

MAGIC = b"VLST"
VERSION = 1
HEADER = MAGIC + bytes([VERSION])
ZERO_HASH = bytes(32)
DEFAULT_MAX_PAYLOAD = 16 * 1024 * 1024
_FRAME_HEAD = struct.Struct(">Q32sQQ")
HEAD_SIZE = 40


def compute_entry_hash(prev_hash: bytes, seq: int, timestamp: int, payload: bytes) -> bytes:
    h = hashlib.sha256(prev_hash)
    h.update(struct.pack(">QQQ", seq, timestamp, len(payload)))
    h.update(payload)
    return h.digest()


@dataclass(frozen=True)
class ChainEntry:
    seq: int
    prev_hash: bytes
    timestamp: int
    payload: bytes
    entry_hash: bytes

    def to_frame(self) -> bytes:
        return (
            _FRAME_HEAD.pack(self.seq, self.prev_hash, self.timestamp, len(self.payload))
            + self.payload
            + self.entry_hash
        )

    def hash_ok(self) -> bool:
        return self.entry_hash == compute_entry_hash(
            self.prev_hash, self.seq, self.timestamp, self.payload
        )


@dataclass(frozen=True)
class StoreHead:
    count: int
    head_hash: bytes = ZERO_HASH

    def to_bytes(self) -> bytes:
        return struct.pack(">Q", self.count) + self.head_hash

    @classmethod
    def from_bytes(cls, data: bytes) -> StoreHead:
        if len(data) != HEAD_SIZE:
            raise StoreError(f"head must be {HEAD_SIZE} bytes, got {len(data)}")
        return cls(struct.unpack(">Q", data[:8])[0], bytes(data[8:]))

    def __str__(self) -> str:
        return f"{self.count}:{self.head_hash.hex()}"


@dataclass(frozen=True)
class VerifyReport:
    intact: bool
    start: int
    stop: int
    count: int
    head: StoreHead | None
    first_bad_seq: int | None = None
    reason: str = ""

    def summary(self) -> str:
        if self.intact:
            return f"intact: entries {self.start}..{self.stop - 1} of {self.count}, head {self.head}"
        where = "header" if self.first_bad_seq is None else f"seq {self.first_bad_seq}"
        return f"TAMPERED at {where}: {self.reason}"


def _parse_frames(data: bytes) -> Iterator[tuple[int, ChainEntry | None, str]]:
    """Yield (offset, entry, problem) for each frame; ``entry`` is None on a broken frame.

    Stops after the first broken frame since framing past it is meaningless.
    """
    pos = len(HEADER)
    end = len(data)
    while pos < end:
        if end - pos < _FRAME_HEAD.size:
            yield pos, None, "incomplete frame header"
            return
        seq, prev, ts, length = _FRAME_HEAD.unpack_from(data, pos)
        body = pos + _FRAME_HEAD.size
        if length > end - body or end - body - length < 32:
            yield pos, None, "frame extends past end of file"
            return
        payload = data[body : body + length]
        entry_hash = data[body + length : body + length + 32]
        yield pos, ChainEntry(seq, prev, ts, payload, entry_hash), ""
        pos = body + length + 32


class ChainStore:
    """Single-writer handle on a store file.

    Readers may open the same file concurrently; appends must be serialized
    by the caller (the site layer holds an advisory lock).
    """

    def __init__(self, path: str | os.PathLike, *, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.path = Path(path)
        self.max_payload = max_payload
        self._offsets: list[int] = []
        self._last_hash = ZERO_HASH
        self._size = 0
        self._tail_problem = ""
        self._max_count_seen = 0
        self._load_index()

    @classmethod
    def create(cls, path: str | os.PathLike, **kwargs) -> ChainStore:
        path = Path(path)
        try:
            with open(path, "xb") as fh:
                fh.write(HEADER)
                fh.flush()
                os.fsync(fh.fileno())
        except FileExistsError as exc:
            raise StoreError(f"store already exists: {path}") from exc
        except OSError as exc:
            raise StoreError(f"cannot create store: {exc}") from exc
        return cls(path, **kwargs)

    def _read_all(self) -> bytes:
        try:
            data = self.path.read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read store: {exc}") from exc
        if data[: len(HEADER)] != HEADER:
            raise IntegrityError("store header is missing or corrupt")
        return data

    def _load_index(self) -> None:
        data = self._read_all()
        self._offsets = []
        self._last_hash = ZERO_HASH
        self._tail_problem = ""
        for offset, entry, problem in _parse_frames(data):
            if entry is None:
                self._tail_problem = problem
                break
            self._offsets.append(offset)
            self._last_hash = entry.entry_hash
        self._size = len(data)

    def __len__(self) -> int:
        return len(self._offsets)

    @property
    def count(self) -> int:
        return len(self._offsets)

    def append(self, payload: bytes, timestamp: int) -> ChainEntry:
        payload = bytes(payload)
        if len(payload) > self.max_payload:
            raise StoreError(f"payload of {len(payload)} bytes exceeds {self.max_payload}")
        if not 0 <= timestamp < 2**64:
            raise StoreError("timestamp out of range")
        if self._tail_problem:
            raise IntegrityError(
                f"store tail is damaged ({self._tail_problem}); run recovery first"
            )
        seq = len(self._offsets)
        entry = ChainEntry(
            seq, self._last_hash, timestamp, payload,
            compute_entry_hash(self._last_hash, seq, timestamp, payload),
        )
        frame = entry.to_frame()
        try:
            with open(self.path, "ab") as fh:
                if fh.tell() != self._size:
                    raise StoreError("store file changed underneath this handle")
                fh.write(frame)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StoreError(f"append failed, entry not recorded: {exc}") from exc
        self._offsets.append(self._size)
        self._size += len(frame)
        self._last_hash = entry.entry_hash
        return entry

    def read(self, seq: int) -> ChainEntry:
        if not 0 <= seq < len(self._offsets):
            raise StoreError(f"seq {seq} out of range (count {len(self._offsets)})")
        try:
            with open(self.path, "rb") as fh:
                fh.seek(self._offsets[seq])
                head = fh.read(_FRAME_HEAD.size)
                s, prev, ts, length = _FRAME_HEAD.unpack(head)
                payload = fh.read(length)
                entry_hash = fh.read(32)
        except (OSError, struct.error) as exc:
            raise StoreError(f"cannot read entry {seq}: {exc}") from exc
        return ChainEntry(s, prev, ts, payload, entry_hash)

    def entries(self, start: int = 0, stop: int | None = None) -> Iterator[ChainEntry]:
        stop = len(self) if stop is None else stop
        for seq in range(start, stop):
            yield self.read(seq)

    def export_head(self) -> StoreHead:
        try:
            size = self.path.stat().st_size
        except OSError as exc:
            raise StoreError(f"cannot stat store: {exc}") from exc
        if size < self._size:
            raise IntegrityError("store file shrank; entries were removed")
        count = len(self._offsets)
        if count < self._max_count_seen:
            raise IntegrityError("head count went backwards")
        self._max_count_seen = count
        return StoreHead(count, self._last_hash)

    def is_prefix(self, head: StoreHead) -> bool:
        """True if ``head`` describes a prefix of the current chain."""
        if head.count > len(self):
            return False
        if head.count == 0:
            return head.head_hash == ZERO_HASH
        return self.read(head.count - 1).entry_hash == head.head_hash

    def verify_range(
        self,
        start: int = 0,
        stop: int | None = None,
        *,
        expected_head: StoreHead | None = None,
    ) -> VerifyReport:
        """Recompute hashes and links for entries ``start <= seq < stop``.

        Reads the file afresh, so on-disk changes made after this handle was
        opened are seen. ``expected_head`` (e.g. an anchored head) adds a
        truncation/rewrite check.
        """
        try:
            data = self.path.read_bytes()
        except OSError as exc:
            raise StoreError(f"cannot read store: {exc}") from exc
        if data[: len(HEADER)] != HEADER:
            return VerifyReport(False, start, start, 0, None, None, "bad store header")

        entries: list[ChainEntry] = []
        broken: tuple[int, str] | None = None
        for _, entry, problem in _parse_frames(data):
            if entry is None:
                broken = (len(entries), problem)
                break
            entries.append(entry)
        count = len(entries)
        whole = stop is None
        stop = count if stop is None else stop
        if start < 0 or stop < start:
            raise StoreError(f"invalid range {start}..{stop}")

        def bad(seq: int, reason: str) -> VerifyReport:
            return VerifyReport(False, start, stop, count, None, seq, reason)

        prev = ZERO_HASH if start == 0 else None
        if start > 0 and start <= count:
            prev = entries[start - 1].entry_hash
        for seq in range(start, min(stop, count)):
            e = entries[seq]
            if e.seq != seq:
                return bad(seq, f"sequence field reads {e.seq}")
            if e.prev_hash != prev:
                return bad(seq, "previous-hash link broken")
            if not e.hash_ok():
                return bad(seq, "entry hash mismatch")
            prev = e.entry_hash
        if broken is not None and (whole or broken[0] < stop):
            return bad(broken[0], broken[1])
        if stop > count:
            return bad(count, f"range ends at {stop} but store has {count} entries")
        if expected_head is not None:
            if expected_head.count > count:
                return bad(count, f"truncated: expected {expected_head.count} entries")
            if expected_head.count > 0 and (
                entries[expected_head.count - 1].entry_hash != expected_head.head_hash
            ):
                return bad(expected_head.count - 1, "history differs from anchored head")
        head = StoreHead(stop, entries[stop - 1].entry_hash if stop else ZERO_HASH)
        return VerifyReport(True, start, stop, count, head)

    def recover(self) -> int:
        """Drop an unacknowledged, partially written tail frame.

        Only a structurally incomplete final frame is removed; complete
        frames, tampered or not, are never touched. Returns bytes dropped.
        """
        data = self._read_all()
        good_end = len(HEADER)
        for offset, entry, _ in _parse_frames(data):
            if entry is None:
                break
            good_end = offset + _FRAME_HEAD.size + len(entry.payload) + 32
        dropped = len(data) - good_end
        if dropped:
            try:
                with open(self.path, "r+b") as fh:
                    fh.truncate(good_end)
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                raise StoreError(f"recovery failed: {exc}") from exc
            log.warning("dropped %d bytes of incomplete tail from %s", dropped, self.path)
        self._load_index()
        return dropped


def anchor_head(head: StoreHead, sink: str | os.PathLike, timeout: float = 5.0) -> bool:
    """Copy ``head`` to an external sink; failures are logged, not raised.

    ``sink`` is an ``http(s)://`` URL (raw 40-byte POST), an existing
    directory (one file per head), or a file path (heads appended).
    """
    blob = head.to_bytes()
    target = str(sink)
    try:
        if target.startswith(("http://", "https://")):
            req = urllib.request.Request(
                target, data=blob, method="POST",
                headers={"Content-Type": "application/octet-stream"},
            )
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                return 200 <= resp.status < 300
        path = Path(target)
        if path.is_dir():
            name = f"{head.count:016d}-{head.head_hash.hex()[:16]}.head"
            with open(path / name, "wb") as fh:
                fh.write(blob)
                fh.flush()
                os.fsync(fh.fileno())
        else:
            with open(path, "ab") as fh:
                fh.write(blob)
                fh.flush()
                os.fsync(fh.fileno())
        return True
    except (OSError, urllib.error.URLError, ValueError) as exc:
        log.warning("could not anchor head to %s: %s", target, exc)
        return False


def latest_anchor(sink: str | os.PathLike) -> StoreHead | None:
    """Highest-count head found in a directory or append-file sink."""
    path = Path(sink)
    blobs: list[bytes] = []
    if path.is_dir():
        blobs = [f.read_bytes() for f in sorted(path.glob("*.head"))]
    elif path.is_file():
        data = path.read_bytes()
        blobs = [data[i : i + HEAD_SIZE] for i in range(0, len(data) - HEAD_SIZE + 1, HEAD_SIZE)]
    heads = [StoreHead.from_bytes(b) for b in blobs if len(b) == HEAD_SIZE]
    return max(heads, key=lambda h: h.count, default=None)
