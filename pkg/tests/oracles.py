"""Independent reference computations used by the tests.

None of these touch the package's sampling code.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import betainc


def collapsed_log_joint(docs, z, K, V, alpha, eta):
    """log p(z, w) with theta and beta integrated out (Polya urn form).

    ``docs`` is a list of term lists, ``z`` a matching list of label lists.
    """
    lg = math.lgamma
    total = 0.0
    n_kv = [[0] * V for _ in range(K)]
    n_k = [0] * K
    for doc, labels in zip(docs, z):
        n_mk = [0] * K
        for v, k in zip(doc, labels):
            n_mk[k] += 1
            n_kv[k][v] += 1
            n_k[k] += 1
        total += lg(K * alpha) - lg(len(doc) + K * alpha)
        total += sum(lg(c + alpha) - lg(alpha) for c in n_mk)
    for k in range(K):
        total += lg(V * eta) - lg(n_k[k] + V * eta)
        total += sum(lg(c + eta) - lg(eta) for c in n_kv[k])
    return total


def exact_conditional(docs, z, m, i, K, V, alpha, eta):
    """p(z_mi = k | rest) as a ratio of collapsed joints, normalized."""
    without_docs = [list(d) for d in docs]
    without_z = [list(l) for l in z]
    del without_docs[m][i]
    del without_z[m][i]
    base = collapsed_log_joint(without_docs, without_z, K, V, alpha, eta)
    ratios = []
    for k in range(K):
        zz = [list(l) for l in z]
        zz[m][i] = k
        ratios.append(math.exp(collapsed_log_joint(docs, zz, K, V, alpha, eta) - base))
    ratios = np.array(ratios)
    return ratios, ratios / ratios.sum()


def exact_posterior(docs, K, V, alpha, eta):
    """Enumerate every joint labeling; return (states, probabilities)."""
    shape = [len(d) for d in docs]
    n = sum(shape)
    states = list(itertools.product(range(K), repeat=n))
    logp = []
    for flat in states:
        z, pos = [], 0
        for length in shape:
            z.append(list(flat[pos : pos + length]))
            pos += length
        logp.append(collapsed_log_joint(docs, z, K, V, alpha, eta))
    logp = np.array(logp)
    p = np.exp(logp - logp.max())
    return states, p / p.sum()


def grid_log_marginal(doc_terms, beta, alpha, cells=200_000):
    """log of the integral of p(w | theta) over Dir(alpha, alpha), K = 2.

    The simplex is cut into equal cells of theta_0; each cell is weighted by
    its exact Beta(alpha, alpha) mass, so the endpoint singularities for
    alpha < 1 are integrated exactly and only the smooth likelihood is
    approximated by its midpoint value.
    """
    edges = np.linspace(0.0, 1.0, cells + 1)
    mass = np.diff(betainc(alpha, alpha, edges))
    t = 0.5 * (edges[:-1] + edges[1:])
    log_lik = np.zeros_like(t)
    for w in doc_terms:
        log_lik += np.log(t * beta[0, w] + (1 - t) * beta[1, w])
    top = log_lik.max()
    return top + math.log(np.sum(mass * np.exp(log_lik - top)))
