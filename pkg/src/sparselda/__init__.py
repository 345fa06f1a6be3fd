"""Distributed collapsed Gibbs LDA with threshold-filtered sparse delta sharing."""

__version__ = "0.1.0"

from .corpus import Corpus, Shard, parse_uci_bow, partition_documents, split_corpus, synthetic_corpus
from .evaluation import estimate_beta, fold_in, perplexity
from .model import CountTables, HyperParams, check_consistency, init_assignments
from .sampler import conditional_distribution, gibbs_sweep, sample_topic
from .sync import DeltaTable, decode_delta_file, encode_delta_file, filter_deltas
from .worker import RunConfig, WorkerConfig, orchestrate_local, run_worker

__all__ = [
    "Corpus", "Shard", "parse_uci_bow", "partition_documents", "split_corpus", "synthetic_corpus",
    "estimate_beta", "fold_in", "perplexity",
    "CountTables", "HyperParams", "check_consistency", "init_assignments",
    "conditional_distribution", "gibbs_sweep", "sample_topic",
    "DeltaTable", "decode_delta_file", "encode_delta_file", "filter_deltas",
    "RunConfig", "WorkerConfig", "orchestrate_local", "run_worker",
]
