"""Shared test scaffolding that drives package code (oracles.py stays independent)."""

import numpy as np

from sparselda.corpus import Corpus, Shard, synthetic_corpus
from sparselda.model import HyperParams, init_assignments
from sparselda.rng import Generator
from sparselda.sampler import gibbs_sweep


def chain_state_frequencies(docs_terms, K, V, alpha, eta, sweeps, seed, burn=200):
    """Empirical distribution of the joint labelling after each sweep.

    Documents must list distinct terms in ascending order so that token
    order in the sampler matches the listed order. States are indexed with
    the first token as the most significant base-K digit.
    """
    docs = [[(v, 1) for v in d] for d in docs_terms]
    shard = Shard(0, list(range(len(docs))), docs)
    hyper = HyperParams(K, alpha, eta)
    rng = Generator(seed)
    a, c, local = init_assignments(shard, hyper, V, seed, rng)
    n = a.num_tokens
    weights = K ** np.arange(n)[::-1]
    hist = np.zeros(K**n)
    for _ in range(burn):
        gibbs_sweep(a, c, local, hyper, rng)
    for _ in range(sweeps):
        gibbs_sweep(a, c, local, hyper, rng)
        hist[int(a.z @ weights)] += 1
    return hist / sweeps


def union_counts(states, K, V):
    """Recount n_kv from the final assignments of every worker."""
    n_kv = np.zeros((K, V), dtype=np.int64)
    for s in states:
        np.add.at(n_kv, (s["z"], s["terms"]), 1)
    return n_kv


def corpus_with_tokens(total, V, K, doc_len, seed):
    """Synthetic corpus cut to exactly ``total`` tokens."""
    corpus, _ = synthetic_corpus(2 * total // doc_len + 10, V, K, doc_len, seed)
    docs, remaining = [], total
    for doc in corpus.docs:
        if remaining == 0:
            break
        kept = []
        for v, c in doc:
            take = min(c, remaining)
            if take:
                kept.append((v, take))
                remaining -= take
        docs.append(kept)
    if remaining:
        raise ValueError("generator produced too few tokens")
    return Corpus(V, docs)
