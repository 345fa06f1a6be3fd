"""Collapsed Gibbs kernel: per-token conditional, categorical draw, sweep."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import Assignments, CountTables, HyperParams
from .rng import Generator, next_double


class StateCorruptionError(RuntimeError):
    pass


@dataclass
class TopicDistribution:
    weights: np.ndarray
    total: float

    def normalized(self) -> np.ndarray:
        return self.weights / self.total


@dataclass
class SweepStats:
    tokens_sampled: int
    elapsed: float
    topic_changes: int
    clamped: int = 0


def conditional_distribution(
    counts: CountTables, doc: int, term: int, hyper: HyperParams
) -> TopicDistribution:
    """Unnormalized p(z_i = k | rest) for a token already removed from counts.

    ``w_k = (n_kv[k, term] + eta) / (n_k[k] + V * eta) * (n_mk[doc, k] + alpha)``
    """
    n_kv = counts.n_kv[:, term]
    n_k = counts.n_k
    n_mk = counts.n_mk[doc]
    if n_kv.min() < 0 or n_k.min() < 0 or n_mk.min() < 0:
        raise StateCorruptionError(f"negative count for document {doc}, term {term}")
    v_eta = counts.vocab_size * hyper.eta
    weights = np.empty(counts.num_topics)
    total = 0.0
    for k in range(counts.num_topics):
        w = (int(n_kv[k]) + hyper.eta) / (int(n_k[k]) + v_eta) * (int(n_mk[k]) + hyper.alpha)
        weights[k] = w
        total += w
    return TopicDistribution(weights, total)


def sample_topic(dist: TopicDistribution, rng) -> int:
    """Inverse-CDF draw from one uniform, scanning topics in increasing order."""
    target = rng.random() * dist.total
    cum = 0.0
    last = 0
    for k, w in enumerate(dist.weights):
        cum += w
        if w > 0:
            last = k
            if target < cum:
                return k
    return last


@njit(cache=True)
def _sweep_kernel(doc_ptr, terms, z, n_kv, n_k, n_mk, local, alpha, eta, v_eta, state, cum, trace):
    K = n_k.shape[0]
    record = trace.shape[0] > 0
    changes = 0
    clamped = 0
    for m in range(doc_ptr.shape[0] - 1):
        for i in range(doc_ptr[m], doc_ptr[m + 1]):
            v = terms[i]
            old = z[i]
            n_kv[old, v] -= 1
            n_k[old] -= 1
            n_mk[m, old] -= 1
            if n_mk[m, old] < 0:
                return -1 - i, changes, clamped
            total = 0.0
            for k in range(K):
                a = n_kv[k, v]
                b = n_k[k]
                if a < 0:
                    a = 0
                    clamped += 1
                if b < 0:
                    b = 0
                    clamped += 1
                w = (a + eta) / (b + v_eta) * (n_mk[m, k] + alpha)
                if record:
                    trace[i, k] = w
                total += w
                cum[k] = total
            target = next_double(state) * total
            new = K - 1
            for k in range(K):
                if target < cum[k]:
                    new = k
                    break
            z[i] = new
            n_kv[new, v] += 1
            n_k[new] += 1
            n_mk[m, new] += 1
            if new != old:
                local[old, v] -= 1
                local[new, v] += 1
                changes += 1
    return 0, changes, clamped


def gibbs_sweep(
    assignments: Assignments,
    counts: CountTables,
    delta: np.ndarray,
    hyper: HyperParams,
    rng: Generator,
    trace: np.ndarray | None = None,
) -> SweepStats:
    """Resample every token once, documents ascending, tokens in order.

    Updates ``assignments.z``, all count tables and the dense local
    modification array ``delta`` in place. Transiently negative global
    counts are clamped to zero for the weight computation (counted in
    ``SweepStats.clamped``); a negative document count raises.

    ``trace``, if given with shape (num_tokens, K), receives the raw weights
    used for every token.
    """
    if trace is None:
        trace = np.empty((0, hyper.num_topics))
    if counts.num_topics != hyper.num_topics:
        raise ValueError(f"tables have K={counts.num_topics}, hyperparameters K={hyper.num_topics}")
    cum = np.empty(hyper.num_topics)
    start = time.perf_counter()
    status, changes, clamped = _sweep_kernel(
        assignments.doc_ptr,
        assignments.terms,
        assignments.z,
        counts.n_kv,
        counts.n_k,
        counts.n_mk,
        delta,
        float(hyper.alpha),
        float(hyper.eta),
        counts.vocab_size * float(hyper.eta),
        rng.state,
        cum,
        trace,
    )
    elapsed = time.perf_counter() - start
    if status < 0:
        token = -1 - status
        doc = int(np.searchsorted(assignments.doc_ptr, token, side="right") - 1)
        raise StateCorruptionError(f"negative n_mk in document {doc} at token {token}")
    return SweepStats(assignments.num_tokens, elapsed, int(changes), int(clamped))
