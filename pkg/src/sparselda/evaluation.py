"""Held-out evaluation: smoothed topic-word estimate, fold-in, perplexity.

Test documents are folded in with the topic-word matrix frozen: Gibbs
sampling runs over the document's own labels only, the document-topic
posterior mean is averaged over ``samples`` sweeps after ``burn_in``, and
each token is scored with ``p(w) = sum_k theta[k] * beta[k, w]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .corpus import Corpus, Document
from .rng import Generator, content_seed, next_double

DEFAULT_BURN_IN = 50
DEFAULT_SAMPLES = 10


class ConsistencyError(ValueError):
    pass


@dataclass
class TopicModelEstimate:
    beta_hat: np.ndarray

    @property
    def num_topics(self) -> int:
        return self.beta_hat.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.beta_hat.shape[1]


@dataclass
class FoldInResult:
    theta_hat: np.ndarray
    log_likelihood: float
    num_tokens: int


def estimate_beta(n_kv: np.ndarray, n_k: np.ndarray, eta: float) -> TopicModelEstimate:
    """``beta[k, v] = (n_kv[k, v] + eta) / (n_k[k] + V * eta)``."""
    if not np.array_equal(n_kv.sum(axis=1), n_k):
        raise ConsistencyError("n_k does not equal the row sums of n_kv")
    if n_kv.size and n_kv.min() < 0:
        raise ConsistencyError("negative topic-word count")
    V = n_kv.shape[1]
    beta = (n_kv + eta) / (n_k[:, None] + V * eta)
    return TopicModelEstimate(np.ascontiguousarray(beta, dtype=np.float64))


@njit(cache=True)
def _fold_in_kernel(terms, beta_t, alpha, burn_in, samples, state):
    n = terms.shape[0]
    K = beta_t.shape[1]
    z = np.empty(n, dtype=np.int64)
    n_k = np.zeros(K, dtype=np.int64)
    for i in range(n):
        k = np.int64(next_double(state) * K)
        if k >= K:
            k = K - 1
        z[i] = k
        n_k[k] += 1
    cum = np.empty(K)
    theta = np.zeros(K)
    denom = n + K * alpha
    for sweep in range(burn_in + samples):
        for i in range(n):
            v = terms[i]
            n_k[z[i]] -= 1
            total = 0.0
            for k in range(K):
                total += beta_t[v, k] * (n_k[k] + alpha)
                cum[k] = total
            target = next_double(state) * total
            new = K - 1
            for k in range(K):
                if target < cum[k]:
                    new = k
                    break
            z[i] = new
            n_k[new] += 1
        if sweep >= burn_in:
            for k in range(K):
                theta[k] += (n_k[k] + alpha) / denom
    for k in range(K):
        theta[k] /= samples
    ll = 0.0
    for i in range(n):
        p = 0.0
        for k in range(K):
            p += theta[k] * beta_t[terms[i], k]
        ll += math.log(p)
    return theta, ll


def _expand(doc: Document) -> np.ndarray:
    if not doc:
        return np.zeros(0, dtype=np.int64)
    terms = np.array([v for v, _ in doc], dtype=np.int64)
    counts = np.array([c for _, c in doc], dtype=np.int64)
    return np.repeat(terms, counts)


def document_seed(seed: int, doc: Document) -> int:
    """Fold-in seed keyed on document content, so duplicates replay identically."""
    return content_seed(seed, np.asarray(doc, dtype=np.int64).tobytes())


def fold_in(
    doc: Document,
    model: TopicModelEstimate,
    alpha: float,
    burn_in: int = DEFAULT_BURN_IN,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    beta_t: np.ndarray | None = None,
) -> FoldInResult:
    if samples < 1 or burn_in < 0:
        raise ValueError("fold-in needs samples >= 1 and burn_in >= 0")
    K = model.num_topics
    terms = _expand(doc)
    if terms.size == 0:
        return FoldInResult(np.full(K, 1.0 / K), 0.0, 0)
    if terms.max() >= model.vocab_size:
        raise ValueError(f"term id {terms.max()} outside vocabulary of size {model.vocab_size}")
    if beta_t is None:
        beta_t = np.ascontiguousarray(model.beta_hat.T)
    rng = Generator(document_seed(seed, doc))
    theta, ll = _fold_in_kernel(terms, beta_t, float(alpha), int(burn_in), int(samples), rng.state)
    return FoldInResult(theta, float(ll), int(terms.size))


def fold_in_corpus(
    test: Corpus,
    model: TopicModelEstimate,
    alpha: float,
    burn_in: int = DEFAULT_BURN_IN,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> list[FoldInResult]:
    if test.vocab_size != model.vocab_size:
        raise ValueError(f"test corpus has V={test.vocab_size}, model has V={model.vocab_size}")
    beta_t = np.ascontiguousarray(model.beta_hat.T)
    return [fold_in(doc, model, alpha, burn_in, samples, seed, beta_t) for doc in test.docs]


def perplexity_from_results(results: list[FoldInResult]) -> float:
    tokens = sum(r.num_tokens for r in results)
    if tokens == 0:
        raise ValueError("test set has no tokens")
    return math.exp(-math.fsum(r.log_likelihood for r in results) / tokens)


def perplexity(
    test: Corpus,
    model: TopicModelEstimate,
    alpha: float,
    burn_in: int = DEFAULT_BURN_IN,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> float:
    """exp(-(sum of token log-likelihoods) / (number of test tokens))."""
    return perplexity_from_results(fold_in_corpus(test, model, alpha, burn_in, samples, seed))
