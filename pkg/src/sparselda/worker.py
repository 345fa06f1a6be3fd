"""Per-worker training loop and the local multi-process orchestrator.

Each worker runs, for its shard of the training documents::

    init labels, publish all local counts (iteration 0)
    for t in 1..T:
        sweep                         -> sample_seconds
        filter, publish, scan+merge   -> sync_seconds

Workers are OS processes that share nothing but ``sync_dir``.
"""

from __future__ import annotations

import csv
import logging
import multiprocessing as mp
import os
import re
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, load_corpus, partition_documents
from .evaluation import DEFAULT_BURN_IN, DEFAULT_SAMPLES, estimate_beta, perplexity
from .model import (
    Assignments,
    CountTables,
    HyperParams,
    check_consistency,
    init_assignments,
    write_checkpoint,
)
from .rng import Generator
from .sampler import gibbs_sweep
from .sync import (
    CURSOR_RE,
    DELTA_RE,
    DeltaTable,
    SyncConfig,
    filter_deltas,
    publish_deltas,
    scan_and_merge,
    write_heartbeat,
)

log = logging.getLogger(__name__)

METRICS_FIELDS = [
    "iteration",
    "sample_seconds",
    "sync_seconds",
    "bytes_published",
    "entries_published",
    "entries_total",
    "topic_changes",
    "perplexity",
]
DONE_RE = re.compile(r"^done_(\d+)\.txt$")


class ConsistencyViolation(RuntimeError):
    pass


@dataclass
class MetricsRecord:
    iteration: int
    sample_seconds: float
    sync_seconds: float
    bytes_published: int
    entries_published: int
    entries_total: int
    topic_changes: int
    perplexity: float | None = None

    def row(self) -> list:
        return [
            self.iteration,
            repr(self.sample_seconds),
            repr(self.sync_seconds),
            self.bytes_published,
            self.entries_published,
            self.entries_total,
            self.topic_changes,
            "" if self.perplexity is None else repr(self.perplexity),
        ]


@dataclass
class WorkerConfig:
    corpus_path: Path
    worker_id: int
    num_workers: int
    hyper: HyperParams
    threshold: float
    sync_dir: Path
    num_iterations: int
    seed: int = 0
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None
    state_path: Path | None = None
    eval_every: int | None = None
    test_path: Path | None = None
    burn_in: int = DEFAULT_BURN_IN
    samples: int = DEFAULT_SAMPLES
    shard_weights: Sequence[float] | None = None
    final_sync: bool = True
    final_sync_timeout: float = 600.0
    check_consistency: bool = False

    def __post_init__(self):
        if self.num_iterations < 1:
            raise ValueError(f"num_iterations must be >= 1, got {self.num_iterations}")
        if not 0 <= self.worker_id < self.num_workers:
            raise ValueError(f"worker_id {self.worker_id} outside [0, {self.num_workers})")


@dataclass
class WorkerResult:
    assignments: Assignments
    counts: CountTables
    metrics: list[MetricsRecord]
    doc_ids: list[int]
    clamped: int = 0


def eval_due(iteration: int, eval_every: int | None, num_iterations: int) -> bool:
    """Evaluate at iteration 1, every ``eval_every`` iterations, and at the end."""
    if not eval_every:
        return False
    return iteration == 1 or iteration % eval_every == 0 or iteration == num_iterations


class _MetricsWriter:
    def __init__(self, path: Path | None):
        self._f = None
        if path is not None:
            self._f = open(path, "w", newline="")
            self._w = csv.writer(self._f)
            self._w.writerow(METRICS_FIELDS)
            self._f.flush()

    def write(self, rec: MetricsRecord) -> None:
        if self._f is not None:
            self._w.writerow(rec.row())
            self._f.flush()

    def close(self) -> None:
        if self._f is not None:
            self._f.close()


def run_worker(config: WorkerConfig, corpus: Corpus | None = None, test: Corpus | None = None) -> WorkerResult:
    """Run one worker to completion; ``corpus``/``test`` skip reloading from disk."""
    if corpus is None:
        corpus = load_corpus(config.corpus_path)
    shard = partition_documents(corpus, config.num_workers, config.shard_weights)[config.worker_id]
    evaluating = bool(config.eval_every) and config.worker_id == 0
    if evaluating and test is None:
        if config.test_path is None:
            raise ValueError("eval_every set but no test corpus given")
        test = load_corpus(config.test_path)

    hyper = config.hyper
    sync = SyncConfig(config.threshold, config.sync_dir, config.worker_id, config.num_workers)
    rng = Generator.for_worker(config.seed, config.worker_id)
    assignments, counts, local = init_assignments(shard, hyper, corpus.vocab_size, config.seed, rng)
    merged = np.zeros_like(counts.n_kv, order="F") if config.check_consistency else None

    write_heartbeat(sync, -1)
    publish_deltas(sync, DeltaTable.from_dense(local), 0)
    local[:] = 0

    metrics: list[MetricsRecord] = []
    writer = _MetricsWriter(config.metrics_path)
    clamped = 0
    try:
        for t in range(1, config.num_iterations + 1):
            t0 = time.perf_counter()
            stats = gibbs_sweep(assignments, counts, local, hyper, rng)
            sample_seconds = time.perf_counter() - t0
            if config.check_consistency:
                _assert_consistent(assignments, counts, merged, t, "sweep")
            t1 = time.perf_counter()
            entries_total = int(np.count_nonzero(local))
            publish, local = filter_deltas(local, counts.n_kv, config.threshold)
            _, nbytes = publish_deltas(sync, publish, t)
            scan_and_merge(sync, counts, merged)
            write_heartbeat(sync, t)
            sync_seconds = time.perf_counter() - t1
            clamped += stats.clamped

            if config.check_consistency:
                _assert_consistent(assignments, counts, merged, t, "merge")
            ppl = None
            if evaluating and eval_due(t, config.eval_every, config.num_iterations):
                model = estimate_beta(counts.n_kv, counts.n_k, hyper.eta)
                ppl = perplexity(test, model, hyper.alpha, config.burn_in, config.samples, config.seed)
            rec = MetricsRecord(
                t, sample_seconds, sync_seconds, nbytes, len(publish), entries_total, stats.topic_changes, ppl
            )
            metrics.append(rec)
            writer.write(rec)
            log.debug("worker %d iteration %d: %s", config.worker_id, t, rec)
    finally:
        writer.close()

    if config.final_sync:
        final = config.num_iterations + 1
        publish_deltas(sync, DeltaTable.from_dense(local), final)
        local[:] = 0
        _announce_done(sync)
        _await_peers(sync, config.final_sync_timeout)
        scan_and_merge(sync, counts, merged)
        write_heartbeat(sync, final)
        if config.check_consistency:
            _assert_consistent(assignments, counts, merged, final, "final merge")

    if config.checkpoint_path is not None:
        write_checkpoint(config.checkpoint_path, counts.n_kv, counts.n_k)
    if config.state_path is not None:
        save_state(config.state_path, shard.doc_ids, assignments, counts)
    return WorkerResult(assignments, counts, metrics, shard.doc_ids, clamped)


def _assert_consistent(assignments, counts, merged, iteration, stage) -> None:
    report = check_consistency(assignments, counts, merged=merged)
    if not report.ok:
        raise ConsistencyViolation(f"iteration {iteration} after {stage}: " + "; ".join(report.violations))


def _announce_done(sync: SyncConfig) -> None:
    (sync.sync_dir / f"done_{sync.worker_id}.txt").write_text("done\n")


def _await_peers(sync: SyncConfig, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    peers = set(sync.peer_cursors)
    while True:
        done = {int(m.group(1)) for e in os.scandir(sync.sync_dir) if (m := DONE_RE.match(e.name))}
        if peers <= done:
            return
        if time.monotonic() > deadline:
            log.warning("worker %d: final sync timed out waiting for %s", sync.worker_id, sorted(peers - done))
            return
        time.sleep(0.01)


def save_state(path: Path, doc_ids: Sequence[int], assignments: Assignments, counts: CountTables) -> None:
    np.savez(
        path,
        doc_ids=np.asarray(doc_ids, dtype=np.int64),
        doc_ptr=assignments.doc_ptr,
        terms=assignments.terms,
        z=assignments.z,
        n_kv=np.ascontiguousarray(counts.n_kv),
        n_k=counts.n_k,
    )


def load_state(path: Path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {k: data[k] for k in data.files}


def read_metrics(path: Path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(
                MetricsRecord(
                    int(row["iteration"]),
                    float(row["sample_seconds"]),
                    float(row["sync_seconds"]),
                    int(row["bytes_published"]),
                    int(row["entries_published"]),
                    int(row["entries_total"]),
                    int(row["topic_changes"]),
                    float(row["perplexity"]) if row["perplexity"] else None,
                )
            )
    return out


def aggregate_metrics(per_worker: list[list[MetricsRecord]]) -> list[MetricsRecord]:
    """One record per iteration: mean durations, summed counts, worker 0's perplexity."""
    if len(per_worker) == 1:
        return list(per_worker[0])
    by_iter: dict[int, list[MetricsRecord]] = {}
    for records in per_worker:
        for rec in records:
            by_iter.setdefault(rec.iteration, []).append(rec)
    ppl = {rec.iteration: rec.perplexity for rec in per_worker[0]}
    out = []
    for it in sorted(by_iter):
        recs = by_iter[it]
        out.append(
            MetricsRecord(
                it,
                sum(r.sample_seconds for r in recs) / len(recs),
                sum(r.sync_seconds for r in recs) / len(recs),
                sum(r.bytes_published for r in recs),
                sum(r.entries_published for r in recs),
                sum(r.entries_total for r in recs),
                sum(r.topic_changes for r in recs),
                ppl.get(it),
            )
        )
    return out


def write_metrics(path: Path, records: list[MetricsRecord]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRICS_FIELDS)
        for rec in records:
            w.writerow(rec.row())


@dataclass
class RunConfig:
    """Everything a run needs besides the worker count."""

    train_path: Path
    out_dir: Path
    hyper: HyperParams
    threshold: float = 0.0
    num_iterations: int = 1500
    seed: int = 0
    sync_dir: Path | None = None
    test_path: Path | None = None
    eval_every: int | None = None
    burn_in: int = DEFAULT_BURN_IN
    samples: int = DEFAULT_SAMPLES
    shard_weights: Sequence[float] | None = None
    worker_thresholds: Sequence[float] | None = None
    final_sync: bool = True
    check_consistency: bool = False

    def worker_config(self, worker_id: int, num_workers: int) -> WorkerConfig:
        out = Path(self.out_dir)
        return WorkerConfig(
            corpus_path=Path(self.train_path),
            worker_id=worker_id,
            num_workers=num_workers,
            hyper=self.hyper,
            threshold=self.threshold if self.worker_thresholds is None else self.worker_thresholds[worker_id],
            sync_dir=self.resolved_sync_dir(),
            num_iterations=self.num_iterations,
            seed=self.seed,
            metrics_path=out / f"metrics_{worker_id}.csv",
            checkpoint_path=out / "checkpoint.bin" if worker_id == 0 else None,
            state_path=out / f"state_{worker_id}.npz",
            eval_every=self.eval_every,
            test_path=Path(self.test_path) if self.test_path else None,
            burn_in=self.burn_in,
            samples=self.samples,
            shard_weights=self.shard_weights,
            final_sync=self.final_sync,
            check_consistency=self.check_consistency,
        )

    def resolved_sync_dir(self) -> Path:
        return Path(self.sync_dir) if self.sync_dir else Path(self.out_dir) / "sync"


@dataclass
class RunResult:
    exit_code: int
    wall_seconds: float
    metrics_path: Path | None
    failed: list[tuple[int, int]] = field(default_factory=list)
    metrics: list[MetricsRecord] = field(default_factory=list)
    worker_metrics: list[list[MetricsRecord]] = field(default_factory=list)


def _worker_main(config: WorkerConfig) -> None:
    try:
        run_worker(config)
    except BaseException:
        log.exception("worker %d failed", config.worker_id)
        raise SystemExit(1)


def _clear_protocol_files(sync_dir: Path) -> None:
    for entry in os.scandir(sync_dir):
        if DELTA_RE.match(entry.name) or CURSOR_RE.match(entry.name) or DONE_RE.match(entry.name):
            os.unlink(entry.path)


def warm_up() -> None:
    """Compile the numba kernels once so forked workers inherit them."""
    from .corpus import Shard
    from .evaluation import fold_in

    shard = Shard(0, [0], [[(0, 2), (1, 1)]])
    hyper = HyperParams(2)
    rng = Generator(0)
    a, c, local = init_assignments(shard, hyper, 2, 0, rng)
    gibbs_sweep(a, c, local, hyper, rng)
    fold_in([(0, 1)], estimate_beta(c.n_kv, c.n_k, 0.01), 0.1, 1, 1)


def orchestrate_local(run: RunConfig, num_workers: int, poll_interval: float = 0.05) -> RunResult:
    """Spawn ``num_workers`` worker processes on one sync directory and wait.

    On the first failure the remaining workers are terminated. Per-worker
    metrics are aggregated into ``out_dir/metrics.csv``.
    """
    if num_workers < 1:
        raise ValueError(f"num_workers must be >= 1, got {num_workers}")
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sync_dir = run.resolved_sync_dir()
    sync_dir.mkdir(parents=True, exist_ok=True)
    _clear_protocol_files(sync_dir)
    configs = [run.worker_config(w, num_workers) for w in range(num_workers)]
    # nobody has consumed anything yet; holds off GC until every worker runs
    for cfg in configs:
        write_heartbeat(SyncConfig(cfg.threshold, sync_dir, cfg.worker_id, num_workers), -1)
    warm_up()

    ctx = mp.get_context("fork")
    start = time.perf_counter()
    procs = []
    for cfg in configs:
        p = ctx.Process(target=_worker_main, args=(cfg,), name=f"lda-worker-{cfg.worker_id}")
        p.start()
        procs.append(p)

    failed: list[tuple[int, int]] = []
    try:
        while True:
            running = 0
            for w, p in enumerate(procs):
                if p.exitcode is None:
                    running += 1
                elif p.exitcode != 0 and all(w != f for f, _ in failed):
                    failed.append((w, p.exitcode))
            if failed or running == 0:
                break
            time.sleep(poll_interval)
    finally:
        for p in procs:
            if p.exitcode is None:
                p.terminate()
        for p in procs:
            p.join()
    wall = time.perf_counter() - start

    if failed:
        for w, code in failed:
            log.error("worker %d failed with exit code %d", w, code)
        return RunResult(1, wall, None, failed)

    per_worker = [read_metrics(cfg.metrics_path) for cfg in configs]
    merged = aggregate_metrics(per_worker)
    metrics_path = out / "metrics.csv"
    write_metrics(metrics_path, merged)
    return RunResult(0, wall, metrics_path, [], merged, per_worker)


def config_dict(run: RunConfig) -> dict:
    """Flat key/value view of a run configuration (for manifests)."""
    out = {}
    for f in fields(run):
        value = getattr(run, f.name)
        if isinstance(value, HyperParams):
            out.update(asdict(value))
        elif value is not None:
            out[f.name] = value
    return out
