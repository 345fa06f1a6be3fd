"""Sparse exchange of topic-word count deltas through a shared directory.

File layout (little-endian)::

    "LDAD" | version u32 | worker_id u32 | iteration u32 | entry_count u64
    entry_count x (k u32, v u32, delta i32), strictly sorted by (k, v)

Files are named ``delta_<worker>_<iteration>.bin`` and appear atomically
(write to a temporary name, then rename). Every worker publishes one file
per iteration, empty or not, so each peer's files form a gapless sequence
that readers consume in order by probing the next expected name. Directory
listings are never trusted for this: entries renamed in during a listing
may or may not be reported.

Heartbeats ``cursor_<worker>.txt`` hold the oldest peer iteration a worker
has not yet consumed, minus one. Files strictly below every heartbeat have
been read by everybody and may be garbage collected.
"""

from __future__ import annotations

import logging
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .model import CountTables

log = logging.getLogger(__name__)

DELTA_MAGIC = b"LDAD"
DELTA_VERSION = 1
HEADER = struct.Struct("<4sIIIQ")
ENTRY_DTYPE = np.dtype([("k", "<u4"), ("v", "<u4"), ("d", "<i4")])
DELTA_RE = re.compile(r"^delta_(\d+)_(\d+)\.bin$")
CURSOR_RE = re.compile(r"^cursor_(\d+)\.txt$")

_U32_MAX = 2**32 - 1
_I32_MIN, _I32_MAX = -(2**31), 2**31 - 1


class DeltaFileError(ValueError):
    pass


class DeltaFormatError(DeltaFileError):
    pass


class DeltaTruncationError(DeltaFileError):
    pass


class DeltaCorruptionError(DeltaFileError):
    pass


class DeltaCapacityError(DeltaFileError):
    pass


@dataclass
class DeltaTable:
    """Sparse (k, v) -> delta map stored as sorted coordinate arrays.

    Invariants: no zero deltas, (k, v) strictly increasing.
    """

    topics: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    terms: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    deltas: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def from_dense(cls, dense: np.ndarray, mask: np.ndarray | None = None) -> "DeltaTable":
        keep = dense != 0 if mask is None else mask & (dense != 0)
        # np.nonzero walks in C index order regardless of memory layout
        k, v = np.nonzero(keep)
        return cls(k.astype(np.int64), v.astype(np.int64), dense[k, v].astype(np.int64))

    @classmethod
    def from_dict(cls, entries: dict[tuple[int, int], int]) -> "DeltaTable":
        items = sorted((kv, d) for kv, d in entries.items() if d != 0)
        if not items:
            return cls()
        k = np.array([kv[0] for kv, _ in items], dtype=np.int64)
        v = np.array([kv[1] for kv, _ in items], dtype=np.int64)
        d = np.array([d for _, d in items], dtype=np.int64)
        return cls(k, v, d)

    def to_dict(self) -> dict[tuple[int, int], int]:
        return {(int(k), int(v)): int(d) for k, v, d in zip(self.topics, self.terms, self.deltas)}

    def to_dense(self, num_topics: int, vocab_size: int) -> np.ndarray:
        out = np.zeros((num_topics, vocab_size), dtype=np.int64, order="F")
        out[self.topics, self.terms] = self.deltas
        return out

    def __len__(self) -> int:
        return len(self.deltas)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DeltaTable):
            return NotImplemented
        return (
            np.array_equal(self.topics, other.topics)
            and np.array_equal(self.terms, other.terms)
            and np.array_equal(self.deltas, other.deltas)
        )


@dataclass
class SyncConfig:
    threshold: float
    sync_dir: Path
    worker_id: int
    num_workers: int
    peer_cursors: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.sync_dir = Path(self.sync_dir)
        check_threshold(self.threshold)
        if not 0 <= self.worker_id < self.num_workers:
            raise ValueError(f"worker_id {self.worker_id} outside [0, {self.num_workers})")
        for p in range(self.num_workers):
            if p != self.worker_id:
                self.peer_cursors.setdefault(p, -1)


@dataclass
class MergeStats:
    files_consumed: int = 0
    entries_applied: int = 0
    bytes_read: int = 0
    files_skipped: int = 0


def check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")


def filter_deltas(
    delta: np.ndarray, n_kv: np.ndarray, threshold: float
) -> tuple[DeltaTable, np.ndarray]:
    """Split local modifications into the relevant part and the residual.

    An entry is relevant when ``|d| / max(n_kv, 1) > threshold``. The
    residual is a dense copy with the published cells zeroed, so
    ``publish.to_dense() + residual == delta``.
    """
    check_threshold(threshold)
    relevant = np.abs(delta) / np.maximum(n_kv, 1) > threshold
    publish = DeltaTable.from_dense(delta, relevant)
    residual = delta.copy(order="F")
    residual[publish.topics, publish.terms] = 0
    return publish, residual


def encode_delta_file(publish: DeltaTable, worker_id: int, iteration: int) -> bytes:
    n = len(publish)
    for name, value in (("worker_id", worker_id), ("iteration", iteration)):
        if not 0 <= value <= _U32_MAX:
            raise DeltaCapacityError(f"{name}={value} does not fit in 32 bits")
    if n:
        if publish.topics.min() < 0 or publish.terms.min() < 0:
            raise DeltaCapacityError("negative topic or term index")
        if publish.topics.max() > _U32_MAX or publish.terms.max() > _U32_MAX:
            raise DeltaCapacityError("topic or term index does not fit in 32 bits")
        if publish.deltas.min() < _I32_MIN or publish.deltas.max() > _I32_MAX:
            raise DeltaCapacityError("delta does not fit in a signed 32-bit integer")
        if (publish.deltas == 0).any():
            raise DeltaCorruptionError("zero delta in publish table")
    order = np.lexsort((publish.terms, publish.topics))
    entries = np.empty(n, dtype=ENTRY_DTYPE)
    entries["k"] = publish.topics[order]
    entries["v"] = publish.terms[order]
    entries["d"] = publish.deltas[order]
    return HEADER.pack(DELTA_MAGIC, DELTA_VERSION, worker_id, iteration, n) + entries.tobytes()


def decode_delta_file(data: bytes) -> tuple[int, int, DeltaTable]:
    if len(data) < HEADER.size:
        raise DeltaTruncationError(f"{len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, worker_id, iteration, count = HEADER.unpack_from(data)
    if magic != DELTA_MAGIC:
        raise DeltaFormatError(f"bad magic {magic!r}")
    if version != DELTA_VERSION:
        raise DeltaFormatError(f"unsupported version {version}")
    payload = len(data) - HEADER.size
    expected = count * ENTRY_DTYPE.itemsize
    if payload < expected:
        raise DeltaTruncationError(f"entry_count={count} needs {expected} payload bytes, found {payload}")
    if payload > expected:
        raise DeltaCorruptionError(f"{payload - expected} trailing bytes after {count} entries")
    entries = np.frombuffer(data, dtype=ENTRY_DTYPE, count=count, offset=HEADER.size)
    k = entries["k"].astype(np.int64)
    v = entries["v"].astype(np.int64)
    d = entries["d"].astype(np.int64)
    if count:
        if (d == 0).any():
            raise DeltaCorruptionError(f"zero delta at entry {int(np.argmax(d == 0))}")
        key_k, key_v = k[1:] - k[:-1], v[1:] - v[:-1]
        bad = (key_k < 0) | ((key_k == 0) & (key_v <= 0))
        if bad.any():
            raise DeltaCorruptionError(f"entries not strictly sorted at entry {int(np.argmax(bad)) + 1}")
    return worker_id, iteration, DeltaTable(k, v, d)


def delta_path(sync_dir: Path, worker_id: int, iteration: int) -> Path:
    return Path(sync_dir) / f"delta_{worker_id}_{iteration}.bin"


def publish_deltas(config: SyncConfig, publish: DeltaTable, iteration: int) -> tuple[Path, int]:
    """Atomically write this worker's delta file; return (path, bytes written)."""
    path = delta_path(config.sync_dir, config.worker_id, iteration)
    payload = encode_delta_file(publish, config.worker_id, iteration)
    try:
        atomic_write(path, payload)
    except OSError as exc:
        raise OSError(f"publishing {path}: {exc}") from exc
    return path, len(payload)


def consumed_through(config: SyncConfig, iteration: int) -> int:
    """Highest iteration whose files, from every worker, this worker is done with."""
    return min([iteration, *config.peer_cursors.values()])


def write_heartbeat(config: SyncConfig, iteration: int) -> None:
    """Record ``consumed_through`` for GC; call after merging."""
    value = consumed_through(config, iteration)
    atomic_write(config.sync_dir / f"cursor_{config.worker_id}.txt", f"{value}\n".encode())


def read_heartbeats(sync_dir: Path) -> dict[int, int]:
    out = {}
    for entry in os.scandir(sync_dir):
        m = CURSOR_RE.match(entry.name)
        if not m:
            continue
        try:
            out[int(m.group(1))] = int(Path(entry.path).read_text().strip())
        except (OSError, ValueError):
            log.warning("unreadable heartbeat %s", entry.path)
    return out


def list_delta_files(sync_dir: Path) -> list[tuple[int, int, Path]]:
    """All ``(worker, iteration, path)`` delta files, sorted."""
    found = []
    for entry in os.scandir(sync_dir):
        m = DELTA_RE.match(entry.name)
        if m:
            found.append((int(m.group(1)), int(m.group(2)), Path(entry.path)))
    found.sort()
    return found


def apply_delta(counts: CountTables, table: DeltaTable, merged: np.ndarray | None = None) -> None:
    """n_kv[k, v] += d and n_k[k] += d for every entry."""
    if len(table) == 0:
        return
    if table.topics.max() >= counts.num_topics or table.terms.max() >= counts.vocab_size:
        raise DeltaCorruptionError(
            f"entry outside K={counts.num_topics}, V={counts.vocab_size}"
        )
    # (k, v) keys are unique within a table, so fancy-index add is safe
    counts.n_kv[table.topics, table.terms] += table.deltas
    np.add.at(counts.n_k, table.topics, table.deltas)
    if merged is not None:
        merged[table.topics, table.terms] += table.deltas


def scan_and_merge(
    config: SyncConfig, counts: CountTables, merged: np.ndarray | None = None
) -> MergeStats:
    """Apply every unseen peer file, oldest first per peer; never waits.

    For each peer the next file is ``cursor + 1``; a missing file ends that
    peer's scan, so a later file can never be applied ahead of an earlier
    one. Corrupt files are logged and skipped (the cursor moves past them).
    A read error stops that peer for this call so the file is retried next
    time. ``merged``, if given, accumulates the applied peer deltas.
    """
    stats = MergeStats()
    for peer in sorted(config.peer_cursors):
        while True:
            iteration = config.peer_cursors[peer] + 1
            path = delta_path(config.sync_dir, peer, iteration)
            try:
                data = path.read_bytes()
            except FileNotFoundError:
                break
            except OSError as exc:
                log.warning("worker %d: cannot read %s (%s); will retry", config.worker_id, path, exc)
                break
            stats.bytes_read += len(data)
            try:
                file_worker, file_iter, table = decode_delta_file(data)
                if (file_worker, file_iter) != (peer, iteration):
                    raise DeltaCorruptionError(
                        f"header says worker {file_worker} iteration {file_iter}"
                    )
                apply_delta(counts, table, merged)
            except DeltaFileError as exc:
                log.error("worker %d: skipping corrupt %s: %s", config.worker_id, path, exc)
                stats.files_skipped += 1
            else:
                stats.files_consumed += 1
                stats.entries_applied += len(table)
            config.peer_cursors[peer] = iteration
    return stats


def collect_garbage(sync_dir: Path) -> int:
    """Remove delta files every worker has consumed.

    A file is removed when its iteration is below every heartbeat. Nothing
    is removed if any worker with delta files has no heartbeat.
    """
    sync_dir = Path(sync_dir)
    cursors = read_heartbeats(sync_dir)
    files = list_delta_files(sync_dir)
    if not cursors or not files:
        return 0
    if any(worker not in cursors for worker, _, _ in files):
        return 0
    floor = min(cursors.values())
    removed = 0
    for _, iteration, path in files:
        if iteration < floor:
            try:
                path.unlink()
                removed += 1
            except OSError as exc:
                log.warning("gc: cannot remove %s: %s", path, exc)
    return removed
