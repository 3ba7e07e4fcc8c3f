"""Append-only, hash-chained audit log stored as newline-delimited canonical JSON."""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

from .clock import Clock, SystemClock
from .crypto import ZERO_HASH, canonical_decode, canonical_encode, digest, digest_value
from .errors import ParseError, StorageError

log = logging.getLogger(__name__)

EVENT_TYPES = (
    "policy_registered",
    "policy_updated",
    "policy_revoked",
    "policy_archived",
    "evaluation_granted",
    "evaluation_denied",
    "capability_issued",
)

ENTRY_FIELDS = (
    "index",
    "timestamp",
    "event_type",
    "actor_key_id",
    "policy_id",
    "policy_version",
    "detail_digest",
    "details",
    "prev_hash",
    "entry_hash",
)


@dataclass(frozen=True)
class AuditEntry:
    index: int
    timestamp: int
    event_type: str
    actor_key_id: str
    policy_id: str
    policy_version: int
    detail_digest: str
    details: Dict[str, Any]
    prev_hash: str
    entry_hash: str

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in ENTRY_FIELDS}

    def encode(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AuditEntry":
        if set(data) != set(ENTRY_FIELDS):
            raise ParseError("audit entry has the wrong field set")
        return cls(**{name: data[name] for name in ENTRY_FIELDS})


def entry_hash(data: Mapping[str, Any]) -> str:
    body = {k: v for k, v in data.items() if k != "entry_hash"}
    return digest(canonical_encode(body))


@dataclass(frozen=True)
class ChainReport:
    ok: bool
    length: int = 0
    first_bad_index: Optional[int] = None
    reason: Optional[str] = None
    head_hash: str = ZERO_HASH

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"ok": self.ok, "length": self.length, "head_hash": self.head_hash}
        if not self.ok:
            out["first_bad_index"] = self.first_bad_index
            out["reason"] = self.reason
        return out


def _check_entry(data: Any, position: int, prev: str) -> Optional[str]:
    if not isinstance(data, dict) or set(data) != set(ENTRY_FIELDS):
        return "malformed"
    if data["event_type"] not in EVENT_TYPES:
        return "malformed"
    if entry_hash(data) != data["entry_hash"]:
        return "hash_mismatch"
    if not isinstance(data["details"], dict) or digest_value(data["details"]) != data["detail_digest"]:
        return "hash_mismatch"
    if data["index"] != position:
        return "index_gap"
    if data["prev_hash"] != prev:
        return "link_mismatch"
    return None


def verify_chain(log_or_entries: Union["AuditLog", bytes, Sequence[Any]]) -> ChainReport:
    """Check every chaining invariant; report the smallest offending index.

    Accepts an :class:`AuditLog`, the raw log bytes (strictest: every line
    must also be byte-canonical), or a sequence of entries/dicts.
    """
    if isinstance(log_or_entries, AuditLog):
        log_or_entries = log_or_entries.raw()
    prev = ZERO_HASH
    if isinstance(log_or_entries, (bytes, bytearray)):
        data = bytes(log_or_entries)
        if not data:
            return ChainReport(True)
        lines = data.split(b"\n")
        if lines[-1] == b"":
            lines.pop()
        else:
            # no trailing newline: the last record is incomplete
            lines[-1] = lines[-1] + b"\x00"
        records: List[Any] = []
        for i, line in enumerate(lines):
            try:
                value = canonical_decode(line)
            except ParseError:
                return ChainReport(False, len(lines), i, "malformed")
            if canonical_encode(value) != line:
                return ChainReport(False, len(lines), i, "malformed")
            records.append(value)
    else:
        records = [e.to_dict() if isinstance(e, AuditEntry) else e for e in log_or_entries]
    for i, rec in enumerate(records):
        problem = _check_entry(rec, i, prev)
        if problem:
            return ChainReport(False, len(records), i, problem)
        prev = rec["entry_hash"]
    return ChainReport(True, len(records), head_hash=prev)


@dataclass
class AuditQuery:
    policy_id: Optional[str] = None
    asset_id: Optional[str] = None
    actor_key_id: Optional[str] = None
    event_type: Optional[str] = None
    since_index: Optional[int] = None

    def matches(self, e: AuditEntry) -> bool:
        if self.policy_id is not None and e.policy_id != self.policy_id:
            return False
        if self.asset_id is not None and e.details.get("asset_id") != self.asset_id:
            return False
        if self.actor_key_id is not None and e.actor_key_id != self.actor_key_id:
            return False
        if self.event_type is not None and e.event_type != self.event_type:
            return False
        if self.since_index is not None and e.index < self.since_index:
            return False
        return True


def query(entries: Iterable[AuditEntry], flt: Optional[AuditQuery] = None, **kw: Any) -> List[AuditEntry]:
    flt = flt or AuditQuery(**kw)
    return sorted((e for e in entries if flt.matches(e)), key=lambda e: e.index)


@dataclass
class AuditEvent:
    event_type: str
    actor_key_id: str
    policy_id: str
    policy_version: int
    details: Dict[str, Any] = field(default_factory=dict)


class AuditLog:
    """Single-writer hash chain; in-memory when ``path`` is None.

    With a path, every append is written and fsynced before it returns,
    and readers see only the flushed prefix.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, clock: Optional[Clock] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.clock = clock or SystemClock()
        self._lock = threading.Lock()
        self._entries: List[AuditEntry] = []
        self._flushed = 0
        if self.path is not None:
            self._recover()

    def _recover(self) -> None:
        assert self.path is not None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.touch()
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            # crash mid-write: the torn record was never acknowledged
            keep = data.rfind(b"\n") + 1
            log.warning("audit log %s: dropping %d-byte torn tail", self.path, len(data) - keep)
            with open(self.path, "r+b") as fh:
                fh.truncate(keep)
                fh.flush()
                os.fsync(fh.fileno())
            data = data[:keep]
        report = verify_chain(data)
        if not report.ok:
            raise StorageError(
                f"audit log {self.path} is broken at entry {report.first_bad_index} ({report.reason})",
                first_bad_index=report.first_bad_index,
                reason=report.reason,
            )
        self._entries = [AuditEntry.from_dict(canonical_decode(line)) for line in data.splitlines()]
        self._flushed = len(data)

    @property
    def head_hash(self) -> str:
        with self._lock:
            return self._entries[-1].entry_hash if self._entries else ZERO_HASH

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def append(self, event: AuditEvent) -> AuditEntry:
        return self.append_many([event])[0]

    def append_many(self, events: Sequence[AuditEvent]) -> List[AuditEntry]:
        """Append events as one durable write."""
        with self._lock:
            prev = self._entries[-1].entry_hash if self._entries else ZERO_HASH
            index = len(self._entries)
            now = self.clock.now()
            new: List[AuditEntry] = []
            for ev in events:
                if ev.event_type not in EVENT_TYPES:
                    raise ValueError(f"unknown audit event type {ev.event_type!r}")
                rec = {
                    "index": index,
                    "timestamp": now,
                    "event_type": ev.event_type,
                    "actor_key_id": ev.actor_key_id,
                    "policy_id": ev.policy_id,
                    "policy_version": ev.policy_version,
                    "detail_digest": digest_value(ev.details),
                    "details": ev.details,
                    "prev_hash": prev,
                }
                rec["entry_hash"] = entry_hash(rec)
                entry = AuditEntry.from_dict(rec)
                new.append(entry)
                prev = entry.entry_hash
                index += 1
            if self.path is not None:
                blob = b"".join(e.encode() + b"\n" for e in new)
                try:
                    with open(self.path, "ab") as fh:
                        fh.write(blob)
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    raise StorageError(f"cannot append to audit log: {exc}") from None
                self._flushed += len(blob)
            self._entries.extend(new)
            return new

    def raw(self) -> bytes:
        """Bytes of the flushed prefix, as persisted (re-read from disk)."""
        if self.path is None:
            with self._lock:
                return b"".join(e.encode() + b"\n" for e in self._entries)
        with self._lock:
            size = self._flushed
        with open(self.path, "rb") as fh:
            return fh.read(size)

    def entries(self) -> List[AuditEntry]:
        with self._lock:
            return list(self._entries)

    def query(self, flt: Optional[AuditQuery] = None, **kw: Any) -> List[AuditEntry]:
        return query(self.entries(), flt, **kw)

    def head(self) -> Dict[str, Any]:
        with self._lock:
            n = len(self._entries)
            return {
                "length": n,
                "last_index": n - 1,
                "head_hash": self._entries[-1].entry_hash if n else ZERO_HASH,
            }
