"""Plain-Python serial collapsed Gibbs sampler.

Shares no code with the compiled kernel: its own generator implementation,
its own count bookkeeping with Python lists. It consumes the same random
stream in the same order, so for a single worker the distributed trainer
must reproduce it bit for bit.
"""

from __future__ import annotations

from .corpus import Corpus
from .rng import PyGenerator


def serial_gibbs(
    corpus: Corpus,
    num_topics: int,
    alpha: float,
    eta: float,
    seed: int,
    num_iterations: int,
    worker_id: int = 0,
) -> tuple[list[list[int]], list[list[int]]]:
    """Run ``num_iterations`` sweeps; return per-document topic labels and n_kv."""
    K, V = num_topics, corpus.vocab_size
    rng = PyGenerator.for_worker(seed, worker_id)
    docs = [[v for v, c in doc for _ in range(c)] for doc in corpus.docs]

    z = []
    for doc in docs:
        labels = []
        for _ in doc:
            k = int(rng.random() * K)
            labels.append(min(k, K - 1))
        z.append(labels)

    n_kv = [[0] * V for _ in range(K)]
    n_k = [0] * K
    n_mk = [[0] * K for _ in docs]
    for m, doc in enumerate(docs):
        for v, k in zip(doc, z[m]):
            n_kv[k][v] += 1
            n_k[k] += 1
            n_mk[m][k] += 1

    v_eta = V * eta
    for _ in range(num_iterations):
        for m, doc in enumerate(docs):
            for i, v in enumerate(doc):
                old = z[m][i]
                n_kv[old][v] -= 1
                n_k[old] -= 1
                n_mk[m][old] -= 1
                cum = []
                total = 0.0
                for k in range(K):
                    total += (n_kv[k][v] + eta) / (n_k[k] + v_eta) * (n_mk[m][k] + alpha)
                    cum.append(total)
                target = rng.random() * total
                new = K - 1
                for k in range(K):
                    if target < cum[k]:
                        new = k
                        break
                z[m][i] = new
                n_kv[new][v] += 1
                n_k[new] += 1
                n_mk[m][new] += 1
    return z, n_kv
