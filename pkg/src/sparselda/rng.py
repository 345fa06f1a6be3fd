"""Deterministic random number generation shared by every sampling path.

The generator is xoshiro256** (Blackman & Vigna) seeded through splitmix64,
so any reimplementation can replay the exact stream:

* ``seed_state(seed)``: run splitmix64 from ``seed mod 2**64`` and take four
  consecutive outputs as the 256-bit state.
* ``next_u64``: the reference xoshiro256** step.
* ``next_double``: ``(next_u64() >> 11) * 2**-53``, a uniform in [0, 1).

Worker streams use ``derive_seed(seed, worker_id) = seed XOR mix64(worker_id)``.

Two implementations live here: numba kernels operating on a ``uint64[4]``
state array (used by the samplers) and a plain-integer version used by the
serial reference sampler and by tests as an independent check.
"""

from __future__ import annotations

import hashlib

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_INV_2_53 = 1.0 / 9007199254740992.0


def mix64(x: int) -> int:
    """splitmix64 finalizer applied to ``x + golden``."""
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def seed_state(seed: int) -> np.ndarray:
    """Expand a 64-bit seed into a xoshiro256** state via splitmix64."""
    x = seed & MASK64
    words = []
    for _ in range(4):
        words.append(mix64(x))
        x = (x + GOLDEN) & MASK64
    return np.array(words, dtype=np.uint64)


def derive_seed(seed: int, worker_id: int) -> int:
    return (seed & MASK64) ^ mix64(worker_id)


def content_seed(seed: int, payload: bytes) -> int:
    """Seed keyed on the content of ``payload`` (blake2b, 8-byte digest)."""
    digest = int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")
    return (seed & MASK64) ^ mix64(digest)


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << k) | (x >> (np.uint64(64) - k))


@njit(cache=True)
def next_u64(s):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    result = _rotl(s1 * np.uint64(5), np.uint64(7)) * np.uint64(9)
    t = s1 << np.uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, np.uint64(45))
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@njit(cache=True)
def next_double(s):
    return np.float64(next_u64(s) >> np.uint64(11)) * _INV_2_53


class Generator:
    """Stateful xoshiro256** stream.

    ``state`` is a ``uint64[4]`` array that the numba kernels advance in
    place, so a ``Generator`` can be handed to a compiled sweep and keep
    producing the same stream afterwards.
    """

    def __init__(self, seed: int):
        self.state = seed_state(seed)

    @classmethod
    def for_worker(cls, seed: int, worker_id: int) -> "Generator":
        return cls(derive_seed(seed, worker_id))

    def random(self) -> float:
        return float(next_double(self.state))

    def copy(self) -> "Generator":
        other = Generator.__new__(Generator)
        other.state = self.state.copy()
        return other


class PyGenerator:
    """Pure-Python xoshiro256** producing the same stream as ``Generator``."""

    def __init__(self, seed: int):
        self.s = [int(w) for w in seed_state(seed)]

    @classmethod
    def for_worker(cls, seed: int, worker_id: int) -> "PyGenerator":
        return cls(derive_seed(seed, worker_id))

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        x = (s1 * 5) & MASK64
        result = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53


@njit(cache=True)
def uniform_topics(s, n, k):
    """``n`` labels, each ``min(floor(u * k), k - 1)`` for one uniform ``u``."""
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        t = np.int64(next_double(s) * k)
        out[i] = t if t < k else k - 1
    return out
