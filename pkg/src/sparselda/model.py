"""Latent state (token topic labels) and the collapsed-Gibbs count tables."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .corpus import Shard
from .rng import Generator, uniform_topics

CHECKPOINT_MAGIC = b"LDAM"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIII")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    num_topics: int
    alpha: float = 0.1
    eta: float = 0.01

    def __post_init__(self):
        if self.num_topics < 1:
            raise ValueError(f"num_topics must be >= 1, got {self.num_topics}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")


@dataclass
class Assignments:
    """Token layout of a shard plus one topic label per token.

    Tokens of local document ``m`` occupy ``doc_ptr[m]:doc_ptr[m + 1]``; a
    ``(term, count)`` pair expands into ``count`` consecutive tokens.
    """

    doc_ptr: np.ndarray
    terms: np.ndarray
    z: np.ndarray

    @classmethod
    def layout(cls, shard: Shard) -> "Assignments":
        lengths = [sum(c for _, c in doc) for doc in shard.docs]
        doc_ptr = np.zeros(len(shard.docs) + 1, dtype=np.int64)
        np.cumsum(lengths, out=doc_ptr[1:])
        terms = np.empty(int(doc_ptr[-1]), dtype=np.int64)
        i = 0
        for doc in shard.docs:
            for v, c in doc:
                terms[i : i + c] = v
                i += c
        return cls(doc_ptr, terms, np.zeros(len(terms), dtype=np.int64))

    @property
    def num_docs(self) -> int:
        return len(self.doc_ptr) - 1

    @property
    def num_tokens(self) -> int:
        return len(self.terms)

    def doc_of_token(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_docs), np.diff(self.doc_ptr))

    def copy(self) -> "Assignments":
        return Assignments(self.doc_ptr.copy(), self.terms.copy(), self.z.copy())


@dataclass
class CountTables:
    """Sufficient statistics of the collapsed sampler.

    ``n_kv`` has logical shape K x V but Fortran memory order, so the K
    counts of a term are contiguous for the per-token weight loop.
    """

    n_kv: np.ndarray
    n_k: np.ndarray
    n_mk: np.ndarray
    n_m: np.ndarray

    @classmethod
    def zeros(cls, num_topics: int, vocab_size: int, num_docs: int) -> "CountTables":
        return cls(
            np.zeros((num_topics, vocab_size), dtype=np.int64, order="F"),
            np.zeros(num_topics, dtype=np.int64),
            np.zeros((num_docs, num_topics), dtype=np.int64),
            np.zeros(num_docs, dtype=np.int64),
        )

    @property
    def num_topics(self) -> int:
        return self.n_kv.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.n_kv.shape[1]

    def copy(self) -> "CountTables":
        return CountTables(
            np.asfortranarray(self.n_kv.copy()), self.n_k.copy(), self.n_mk.copy(), self.n_m.copy()
        )


def tables_from_assignments(assignments: Assignments, num_topics: int, vocab_size: int) -> CountTables:
    """Recompute all four tables from scratch (the local-only view)."""
    counts = CountTables.zeros(num_topics, vocab_size, assignments.num_docs)
    z, terms = assignments.z, assignments.terms
    np.add.at(counts.n_kv, (z, terms), 1)
    counts.n_k[:] = np.bincount(z, minlength=num_topics)[:num_topics]
    docs = assignments.doc_of_token()
    np.add.at(counts.n_mk, (docs, z), 1)
    counts.n_m[:] = np.diff(assignments.doc_ptr)
    return counts


def init_assignments(
    shard: Shard,
    hyper: HyperParams,
    vocab_size: int,
    seed: int,
    rng: Generator | None = None,
) -> tuple[Assignments, CountTables, np.ndarray]:
    """Draw every token's topic uniformly and build consistent tables.

    Each token consumes one uniform ``u`` and gets topic ``floor(u * K)``.
    The generator defaults to the worker stream for ``(seed, worker_id)``;
    pass ``rng`` to keep drawing from it in later sweeps.

    Returns the assignments, the count tables, and the dense K x V array of
    local modifications (initially the whole local contribution to n_kv).
    """
    if rng is None:
        rng = Generator.for_worker(seed, shard.worker_id)
    assignments = Assignments.layout(shard)
    if assignments.num_tokens:
        assignments.z[:] = uniform_topics(rng.state, assignments.num_tokens, hyper.num_topics)
    counts = tables_from_assignments(assignments, hyper.num_topics, vocab_size)
    local = counts.n_kv.copy(order="F")
    return assignments, counts, local


@dataclass
class ConsistencyReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def check_consistency(
    assignments: Assignments,
    counts: CountTables,
    merged: np.ndarray | None = None,
    local_only: bool = False,
) -> ConsistencyReport:
    """Verify the count-table invariants; violations are returned, not raised.

    ``n_mk`` and ``n_m`` must match a recount of ``assignments`` exactly.
    For ``n_kv``: with ``local_only`` it must equal the recount; with
    ``merged`` (the accumulated peer contributions) it must equal recount +
    merged; otherwise it must dominate the recount elementwise, since peer
    contributions are never negative.
    """
    report = ConsistencyReport()
    out = report.violations
    K = counts.num_topics

    for name in ("n_kv", "n_k", "n_mk", "n_m"):
        arr = getattr(counts, name)
        if arr.size and arr.min() < 0:
            idx = np.unravel_index(int(np.argmin(arr)), arr.shape)
            out.append(f"negative entry in {name} at {tuple(int(i) for i in idx)}")

    row_sums = counts.n_kv.sum(axis=1)
    for k in np.flatnonzero(row_sums != counts.n_k):
        out.append(f"row-sum mismatch at k={k}: sum_v n_kv={row_sums[k]} but n_k={counts.n_k[k]}")

    doc_sums = counts.n_mk.sum(axis=1)
    for m in np.flatnonzero(doc_sums != counts.n_m):
        out.append(f"document {m}: sum_k n_mk={doc_sums[m]} but n_m={counts.n_m[m]}")

    if assignments.num_tokens and (assignments.z.min() < 0 or assignments.z.max() >= K):
        out.append("topic label outside [0, K)")
        return report

    recount = tables_from_assignments(assignments, K, counts.vocab_size)
    for m in np.flatnonzero(recount.n_m != counts.n_m):
        out.append(f"document {m}: n_m={counts.n_m[m]} but document has {recount.n_m[m]} tokens")
    bad_docs = np.flatnonzero((recount.n_mk != counts.n_mk).any(axis=1))
    for m in bad_docs:
        out.append(f"document {m}: n_mk disagrees with assignments")

    if local_only:
        expected = recount.n_kv
    elif merged is not None:
        expected = recount.n_kv + merged
    else:
        expected = None
    if expected is not None:
        diff = np.argwhere(expected != counts.n_kv)
        if len(diff):
            k, v = diff[0]
            out.append(f"n_kv mismatch at (k={k}, v={v}) in {len(diff)} cells")
    else:
        below = np.argwhere(counts.n_kv < recount.n_kv)
        if len(below):
            k, v = below[0]
            out.append(f"n_kv below local contribution at (k={k}, v={v}) in {len(below)} cells")
    return report


def encode_checkpoint(n_kv: np.ndarray, n_k: np.ndarray) -> bytes:
    K, V = n_kv.shape
    if n_k.shape != (K,):
        raise CheckpointError(f"n_k has shape {n_k.shape}, expected ({K},)")
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, K, V)
    body = np.ascontiguousarray(n_kv, dtype="<i8").tobytes(order="C")
    return header + body + np.asarray(n_k, dtype="<i8").tobytes()


def decode_checkpoint(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(data) < _CHECKPOINT_HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    magic, version, K, V = _CHECKPOINT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    expected = _CHECKPOINT_HEADER.size + 8 * (K * V + K)
    if len(data) != expected:
        raise CheckpointError(f"checkpoint is {len(data)} bytes, expected {expected} for K={K}, V={V}")
    off = _CHECKPOINT_HEADER.size
    n_kv = np.frombuffer(data, dtype="<i8", count=K * V, offset=off).reshape(K, V)
    n_k = np.frombuffer(data, dtype="<i8", count=K, offset=off + 8 * K * V)
    return np.asfortranarray(n_kv, dtype=np.int64), n_k.astype(np.int64)


def write_checkpoint(path: str | Path, n_kv: np.ndarray, n_k: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, encode_checkpoint(n_kv, n_k))


def read_checkpoint(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
