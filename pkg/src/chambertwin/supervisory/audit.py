"""Hash-chained, append-only audit log.

Every record carries the SHA-256 of (previous record's hash || its own
canonical bytes), so editing, deleting, or reordering any line breaks the
chain at that sequence number and verification pinpoints it. The first
record chains from an all-zero genesis hash.

File format, one record per line::

    seq(10)|ts_ms(13)|username|role|action|target|old|new|prev_hash(64)|hash(64)

seq and ts_ms are zero-padded fixed width; free-text fields are
percent-encoded so the pipe and newline can never appear inside a field.
"""
from __future__ import annotations

import hashlib
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, TextIO
from urllib.parse import quote, unquote

GENESIS = bytes(32)


class AuditIntegrityError(Exception):
    """The stored chain does not verify; ``bad_seq`` names the first break."""

    def __init__(self, bad_seq: int, reason: str) -> None:
        super().__init__(f"audit chain broken at seq {bad_seq}: {reason}")
        self.bad_seq = bad_seq
        self.reason = reason


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    ts_ms: int
    username: str
    role: str
    action: str
    target: str
    old: str
    new: str
    prev_hash: bytes
    record_hash: bytes

    def canonical_bytes(self) -> bytes:
        return canonical_bytes(
            self.seq, self.ts_ms, self.username, self.role,
            self.action, self.target, self.old, self.new,
        )

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "ts_ms": self.ts_ms,
            "username": self.username,
            "role": self.role,
            "action": self.action,
            "target": self.target,
            "old": self.old,
            "new": self.new,
            "prev_hash": self.prev_hash.hex(),
            "record_hash": self.record_hash.hex(),
        }


def _q(field: str) -> str:
    return quote(field, safe="")


def canonical_bytes(
    seq: int, ts_ms: int, username: str, role: str,
    action: str, target: str, old: str, new: str,
) -> bytes:
    fields = (
        f"{seq:010d}",
        f"{ts_ms:013d}",
        _q(username),
        _q(role),
        _q(action),
        _q(target),
        _q(old),
        _q(new),
    )
    return "|".join(fields).encode("ascii")


def chain_hash(prev_hash: bytes, canonical: bytes) -> bytes:
    return hashlib.sha256(prev_hash + canonical).digest()


def format_line(record: AuditRecord) -> str:
    return (
        record.canonical_bytes().decode("ascii")
        + f"|{record.prev_hash.hex()}|{record.record_hash.hex()}\n"
    )


def parse_line(line: str, lineno: int) -> AuditRecord:
    parts = line.rstrip("\n").split("|")
    if len(parts) != 10:
        raise AuditIntegrityError(lineno, f"expected 10 fields, found {len(parts)}")
    try:
        record = AuditRecord(
            seq=int(parts[0]),
            ts_ms=int(parts[1]),
            username=unquote(parts[2]),
            role=unquote(parts[3]),
            action=unquote(parts[4]),
            target=unquote(parts[5]),
            old=unquote(parts[6]),
            new=unquote(parts[7]),
            prev_hash=bytes.fromhex(parts[8]),
            record_hash=bytes.fromhex(parts[9]),
        )
    except ValueError as exc:
        raise AuditIntegrityError(lineno, f"unparseable field: {exc}") from exc
    # Reject any stored form other than the one the writer emits. Without
    # this, byte changes with the same decoded meaning (uppercased hash hex,
    # re-quoted text, widened integers) would slide past hash verification.
    if format_line(record) != line + ("" if line.endswith("\n") else "\n"):
        raise AuditIntegrityError(lineno, "non-canonical serialization")
    return record


class AuditLog:
    """Single-writer append log with fsync-before-return durability."""

    def __init__(self, path: str | Path, clock: Callable[[], float] = time.time) -> None:
        self._path = Path(path)
        self._clock = clock
        self._lock = threading.Lock()
        self._next_seq = 1
        self._tip = GENESIS
        self._sink: TextIO | None = None
        self._path.parent.mkdir(parents=True, exist_ok=True)
        if self._path.exists():
            tail = None
            for tail in self.records():
                pass
            if tail is not None:
                self._next_seq = tail.seq + 1
                self._tip = tail.record_hash

    def close(self) -> None:
        with self._lock:
            if self._sink is not None and not self._sink.closed:
                self._sink.close()

    @property
    def path(self) -> Path:
        return self._path

    def append(
        self, username: str, role: str, action: str,
        target: str, old: str = "", new: str = "",
    ) -> AuditRecord:
        with self._lock:
            canonical = canonical_bytes(
                self._next_seq, int(self._clock() * 1000),
                username, role, action, target, old, new,
            )
            record = parse_line(
                canonical.decode("ascii")
                + f"|{self._tip.hex()}|{chain_hash(self._tip, canonical).hex()}",
                self._next_seq,
            )
            if self._sink is None or self._sink.closed:
                self._sink = self._path.open("a", encoding="ascii")
            self._sink.write(format_line(record))
            self._sink.flush()
            os.fsync(self._sink.fileno())
            self._next_seq = record.seq + 1
            self._tip = record.record_hash
            return record

    def records(self) -> Iterator[AuditRecord]:
        yield from read_records(self._path)

    def verify(self) -> tuple[bool, int | None]:
        """Recompute the whole chain; (True, None) or (False, first bad seq)."""
        return verify_file(self._path)


def read_records(path: str | Path) -> Iterator[AuditRecord]:
    path = Path(path)
    if not path.exists():
        return
    with path.open("r", encoding="ascii") as source:
        for lineno, line in enumerate(source, start=1):
            if line.strip():
                yield parse_line(line, lineno)


def verify_file(path: str | Path) -> tuple[bool, int | None]:
    """Walk a stored chain without loading it for appends.

    Safe on arbitrarily mangled files: structural damage on line k reports
    seq k the same way a hash break there would.
    """
    try:
        expected_prev = GENESIS
        expected_seq = 1
        for record in read_records(path):
            if record.seq != expected_seq:
                return False, expected_seq
            if record.prev_hash != expected_prev:
                return False, record.seq
            if chain_hash(record.prev_hash, record.canonical_bytes()) != record.record_hash:
                return False, record.seq
            expected_prev = record.record_hash
            expected_seq += 1
    except AuditIntegrityError as err:
        return False, err.bad_seq
    except UnicodeDecodeError:
        return False, expected_seq
    return True, None
