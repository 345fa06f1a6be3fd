"""Command line: train, eval, bench, inspect-delta, gc, synth.

Every flag can also be set through the environment as
``SPARSELDA_<FLAG>`` (upper case, dashes to underscores), e.g.
``SPARSELDA_TOPICS=20``. Explicit flags win over the environment.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .corpus import (
    CorpusFormatError,
    load_corpus,
    parse_synthetic_params,
    save_corpus,
    split_corpus,
    synthetic_corpus,
    write_uci_bow,
)
from .evaluation import (
    DEFAULT_BURN_IN,
    DEFAULT_SAMPLES,
    estimate_beta,
    fold_in_corpus,
    perplexity_from_results,
)
from .model import CHECKPOINT_VERSION, CheckpointError, HyperParams, read_checkpoint
from .sync import DELTA_VERSION, DeltaFileError, collect_garbage, decode_delta_file
from .worker import RunConfig, RunResult, orchestrate_local

log = logging.getLogger("sparselda")

ENV_PREFIX = "SPARSELDA_"
MANIFEST_NAME = "manifest.txt"
REPLAY_KEYS = [
    "corpus", "vocab", "synthetic", "test_fraction", "topics", "alpha", "eta", "iters",
    "threshold", "workers", "seed", "eval_every", "burn_in", "samples",
]
BENCH_FIELDS = [
    "workers", "threshold", "status", "wall_seconds", "speedup", "initial_perplexity",
    "final_perplexity", "mean_sync_fraction", "mean_published_fraction", "bytes_published",
]


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _threshold(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"threshold must be in [0, 1], got {value}")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {value}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1), got {value}")
    return value


def _list_of(item_type):
    def parse(text: str) -> list:
        items = [item_type(t) for t in text.split(",") if t.strip()]
        if not items:
            raise argparse.ArgumentTypeError("list must not be empty")
        return items

    return parse


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", type=Path, help="UCI docword file")
    p.add_argument("--vocab", type=Path, help="optional UCI vocabulary file")
    p.add_argument("--synthetic", metavar="M,V,K_TRUE,DOC_LEN,SEED",
                   help="generate an LDA corpus instead of reading --corpus")
    p.add_argument("--test-fraction", type=_fraction, default=0.1)


def _add_model_flags(p: argparse.ArgumentParser, iters_default: int) -> None:
    p.add_argument("--topics", type=_positive_int, default=50)
    p.add_argument("--alpha", type=_positive_float, default=0.1)
    p.add_argument("--eta", type=_positive_float, default=0.01)
    p.add_argument("--iters", type=_positive_int, default=iters_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--burn-in", type=_nonneg_int, default=DEFAULT_BURN_IN)
    p.add_argument("--samples", type=_positive_int, default=DEFAULT_SAMPLES)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparselda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train with C local worker processes")
    _add_corpus_flags(p)
    _add_model_flags(p, iters_default=1500)
    p.add_argument("--threshold", type=_threshold, default=0.0)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--sync-dir", type=Path)
    p.add_argument("--eval-every", type=_nonneg_int, default=0,
                   help="evaluate test perplexity at iteration 1, every N, and the last (0 = never)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--replay", type=Path, metavar="MANIFEST",
                   help="take every training flag from an earlier run's manifest")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--test", type=Path, required=True)
    p.add_argument("--alpha", type=_positive_float, default=0.1)
    p.add_argument("--eta", type=_positive_float, default=0.01)
    p.add_argument("--burn-in", type=_nonneg_int, default=DEFAULT_BURN_IN)
    p.add_argument("--samples", type=_positive_int, default=DEFAULT_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-doc", type=Path, help="write per-document log-likelihoods as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="sweep worker counts x thresholds")
    _add_corpus_flags(p)
    _add_model_flags(p, iters_default=100)
    p.add_argument("--workers-list", type=_list_of(_positive_int), default=[1])
    p.add_argument("--threshold-list", type=_list_of(_threshold), default=[0.0])
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect-delta", help="dump and validate a delta file")
    p.add_argument("path", type=Path)
    p.add_argument("--limit", type=_nonneg_int, default=None, help="print at most N entries")
    p.set_defaults(func=cmd_inspect_delta)

    p = sub.add_parser("gc", help="remove delta files every worker has moved past")
    p.add_argument("sync_dir", type=Path)
    p.set_defaults(func=cmd_gc)

    p = sub.add_parser("synth", help="write a synthetic corpus in UCI format")
    p.add_argument("--synthetic", metavar="M,V,K_TRUE,DOC_LEN,SEED", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    for action in sub.choices.values():
        _apply_env_defaults(action)
    return parser


def _apply_env_defaults(parser: argparse.ArgumentParser) -> None:
    """Use SPARSELDA_<FLAG> as the default; argparse converts string defaults."""
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        name = ENV_PREFIX + action.dest.upper()
        if name in os.environ:
            action.default = os.environ[name]
            action.required = False


def _load_input_corpus(args):
    """Return (corpus, identity label, sha256 of the source bytes)."""
    if args.synthetic:
        m, v, k, length, seed = parse_synthetic_params(args.synthetic)
        corpus, _ = synthetic_corpus(m, v, k, length, seed)
        buf = io.StringIO()
        write_uci_bow(corpus, buf)
        digest = hashlib.sha256(buf.getvalue().encode()).hexdigest()
        return corpus, f"synthetic:{args.synthetic}", digest
    if args.corpus is None:
        raise _UsageError("one of --corpus or --synthetic is required")
    digest = hashlib.sha256(Path(args.corpus).read_bytes()).hexdigest()
    return load_corpus(args.corpus, args.vocab), str(args.corpus), digest


class _UsageError(Exception):
    pass


def _prepare_run(args, out: Path, num_workers: int, threshold: float, eval_every: int | None) -> tuple[RunConfig, dict]:
    corpus, identity, digest = _load_input_corpus(args)
    train, test = split_corpus(corpus, args.test_fraction, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    train_path, test_path = out / "train.txt", out / "test.txt"
    save_corpus(train, train_path)
    if test.num_docs:
        save_corpus(test, test_path)
    if eval_every and not test.num_tokens:
        raise _UsageError("evaluation requested but the test split is empty (use --test-fraction > 0)")
    run = RunConfig(
        train_path=train_path,
        out_dir=out,
        hyper=HyperParams(args.topics, args.alpha, args.eta),
        threshold=threshold,
        num_iterations=args.iters,
        seed=args.seed,
        sync_dir=getattr(args, "sync_dir", None),
        test_path=test_path if test.num_docs else None,
        eval_every=eval_every or None,
        burn_in=args.burn_in,
        samples=args.samples,
    )
    info = {"corpus_identity": identity, "corpus_sha256": digest,
            "train_docs": train.num_docs, "test_docs": test.num_docs,
            "train_tokens": train.num_tokens, "vocab_size": corpus.vocab_size}
    return run, info


def read_manifest(path: Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _write_manifest(path: Path, entries: dict) -> None:
    with open(path, "x") as f:
        for key, value in entries.items():
            f.write(f"{key}={'' if value is None else value}\n")


def _replay_args(args) -> None:
    manifest = read_manifest(args.replay)
    for key in REPLAY_KEYS:
        if key not in manifest:
            continue
        raw = manifest[key]
        current = getattr(args, key)
        if raw == "":
            setattr(args, key, None)
        elif isinstance(current, bool):
            setattr(args, key, raw == "True")
        elif key in ("corpus", "vocab"):
            setattr(args, key, Path(raw))
        elif key == "synthetic":
            setattr(args, key, raw)
        elif key in ("alpha", "eta", "threshold", "test_fraction"):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, int(raw))


def cmd_train(args) -> int:
    if args.replay:
        _replay_args(args)
    manifest_path = args.out / MANIFEST_NAME
    if manifest_path.exists():
        raise _UsageError(f"{args.out} already holds a run manifest; choose a fresh --out")
    started = datetime.now(timezone.utc).isoformat()
    run, info = _prepare_run(args, args.out, args.workers, args.threshold, args.eval_every)
    result = orchestrate_local(run, args.workers)
    entries = {
        "sparselda_version": __version__,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "delta_format_version": DELTA_VERSION,
        "checkpoint_format_version": CHECKPOINT_VERSION,
        "hash_algorithm": "sha256",
        **info,
    }
    for key in REPLAY_KEYS:
        entries[key] = getattr(args, key)
    entries["sync_dir"] = run.resolved_sync_dir()
    entries["exit_code"] = result.exit_code
    entries["wall_seconds"] = repr(result.wall_seconds)
    _write_manifest(manifest_path, entries)
    _report_failures(result)
    if result.exit_code == 0:
        last = result.metrics[-1].perplexity if result.metrics else None
        print(f"trained {args.iters} iterations with {args.workers} worker(s) in {result.wall_seconds:.3f}s")
        if last is not None:
            print(f"perplexity={last:.12g}")
    return result.exit_code


def _report_failures(result: RunResult) -> None:
    for worker, code in result.failed:
        print(f"error: worker {worker} failed (exit code {code})", file=sys.stderr)


def cmd_eval(args) -> int:
    n_kv, n_k = read_checkpoint(args.model)
    model = estimate_beta(n_kv, n_k, args.eta)
    test = load_corpus(args.test)
    results = fold_in_corpus(test, model, args.alpha, args.burn_in, args.samples, args.seed)
    value = perplexity_from_results(results)
    if args.per_doc:
        with open(args.per_doc, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["document", "tokens", "log_likelihood"])
            for m, r in enumerate(results):
                w.writerow([m, r.num_tokens, repr(r.log_likelihood)])
    print(f"perplexity={value:.12g}")
    return 0


def _mean(values) -> float:
    values = [v for v in values if v is not None and not math.isnan(v)]
    return sum(values) / len(values) if values else float("nan")


def bench_cell_stats(result: RunResult) -> dict:
    """Summaries of one cell's aggregated metrics."""
    recs = result.metrics
    sync_frac = [r.sync_seconds / (r.sample_seconds + r.sync_seconds)
                 for r in recs if r.sample_seconds + r.sync_seconds > 0]
    pub_frac = [r.entries_published / r.entries_total for r in recs if r.entries_total]
    ppl = [r.perplexity for r in recs if r.perplexity is not None]
    return {
        "wall_seconds": result.wall_seconds,
        "initial_perplexity": ppl[0] if ppl else None,
        "final_perplexity": ppl[-1] if ppl else None,
        "mean_sync_fraction": _mean(sync_frac),
        "mean_published_fraction": _mean(pub_frac),
        "bytes_published": sum(r.bytes_published for r in recs),
    }


def cmd_bench(args) -> int:
    workers_list = list(dict.fromkeys(args.workers_list))
    if 1 not in workers_list:
        workers_list.insert(0, 1)
    thresholds = list(dict.fromkeys(args.threshold_list))
    args.out_dir.mkdir(parents=True, exist_ok=True)

    corpus, identity, digest = _load_input_corpus(args)
    # write the source once so every cell splits the same bytes
    source = args.out_dir / "corpus.txt"
    save_corpus(corpus, source)
    args.corpus, args.vocab, args.synthetic = source, None, None

    rows, baseline, any_failed = [], {}, False
    for c in workers_list:
        for t in thresholds:
            cell_dir = args.out_dir / f"C{c}_t{t:g}"
            row = {"workers": c, "threshold": t}
            try:
                run, _ = _prepare_run(args, cell_dir, c, t, eval_every=args.iters)
                result = orchestrate_local(run, c)
            except Exception as exc:
                log.exception("bench cell C=%d t=%g failed", c, t)
                row.update(status=f"error: {exc}")
                any_failed = True
                rows.append(row)
                continue
            if result.exit_code != 0:
                any_failed = True
                row["status"] = "failed workers " + ",".join(str(w) for w, _ in result.failed)
                rows.append(row)
                continue
            row.update(status="ok", **bench_cell_stats(result))
            if c == 1:
                baseline[t] = result.wall_seconds
            rows.append(row)
            print(f"C={c} t={t:g}: {result.wall_seconds:.3f}s", flush=True)

    for row in rows:
        base = baseline.get(row["threshold"])
        if row.get("status") == "ok" and base is not None:
            row["speedup"] = 1.0 if row["workers"] == 1 else base / row["wall_seconds"]

    bench_path = args.out_dir / "bench.csv"
    with open(bench_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in BENCH_FIELDS})
    with open(args.out_dir / "corpus_identity.txt", "w") as f:
        f.write(f"corpus={identity}\ncorpus_sha256={digest}\n")
    print(f"wrote {bench_path}")
    return 1 if any_failed else 0


def cmd_inspect_delta(args) -> int:
    data = args.path.read_bytes()
    worker, iteration, table = decode_delta_file(data)
    print(f"file: {args.path}")
    print("magic: LDAD")
    print(f"version: {DELTA_VERSION}")
    print(f"worker_id: {worker}")
    print(f"iteration: {iteration}")
    print(f"{len(table)} entries")
    shown = len(table) if args.limit is None else min(args.limit, len(table))
    for k, v, d in zip(table.topics[:shown], table.terms[:shown], table.deltas[:shown]):
        print(f"{k}\t{v}\t{d:+d}")
    if shown < len(table):
        print(f"... {len(table) - shown} more")
    return 0


def cmd_gc(args) -> int:
    if not args.sync_dir.is_dir():
        print(f"removed 0 files (no directory {args.sync_dir})")
        return 0
    removed = collect_garbage(args.sync_dir)
    print(f"removed {removed} files")
    return 0


def cmd_synth(args) -> int:
    m, v, k, length, seed = parse_synthetic_params(args.synthetic)
    corpus, _ = synthetic_corpus(m, v, k, length, seed)
    save_corpus(corpus, args.out)
    print(f"wrote {corpus.num_docs} documents, {corpus.num_tokens} tokens to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(processName)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except _UsageError as exc:
        parser.error(str(exc))
    except (DeltaFileError, CheckpointError, CorpusFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
