"""Bag-of-words corpora: UCI docword ingestion, train/test split, sharding.

A document is a list of ``(term_id, count)`` pairs with 0-based term ids,
sorted by term id. Documents may be empty; they keep their index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

Document = list[tuple[int, int]]


class CorpusFormatError(ValueError):
    """Malformed docword input; ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class CorpusRangeError(CorpusFormatError):
    pass


class CorpusValueError(CorpusFormatError):
    pass


@dataclass
class Corpus:
    vocab_size: int
    docs: list[Document]
    vocab: list[str] | None = None

    @property
    def num_docs(self) -> int:
        return len(self.docs)

    def doc_lengths(self) -> np.ndarray:
        return np.array([sum(c for _, c in d) for d in self.docs], dtype=np.int64)

    @property
    def num_tokens(self) -> int:
        return int(self.doc_lengths().sum())

    def validate(self) -> None:
        for m, doc in enumerate(self.docs):
            for v, c in doc:
                if not 0 <= v < self.vocab_size:
                    raise CorpusRangeError(f"document {m}: term id {v} outside [0, {self.vocab_size})")
                if c < 1:
                    raise CorpusValueError(f"document {m}: count {c} < 1")
        if self.vocab is not None and len(self.vocab) != self.vocab_size:
            raise CorpusValueError(f"vocabulary has {len(self.vocab)} terms, expected {self.vocab_size}")

    def subset(self, doc_ids: Iterable[int]) -> "Corpus":
        return Corpus(self.vocab_size, [self.docs[i] for i in doc_ids], self.vocab)


@dataclass
class Shard:
    worker_id: int
    doc_ids: list[int]
    docs: list[Document] = field(repr=False)

    @property
    def num_tokens(self) -> int:
        return sum(c for d in self.docs for _, c in d)


def _header_int(line: str, lineno: int, name: str) -> int:
    try:
        value = int(line.strip())
    except ValueError:
        raise CorpusFormatError(f"expected integer {name} in header, got {line.strip()!r}", lineno) from None
    if value < 0:
        raise CorpusFormatError(f"negative {name} in header", lineno)
    return value


def parse_uci_bow(docword: TextIO, vocab: TextIO | None = None) -> Corpus:
    """Parse a UCI Bag-of-Words ``docword`` stream.

    Entries may appear in any order; repeated ``(doc, word)`` pairs are
    summed. Ids in the file are 1-based and are converted to 0-based.
    """
    header = []
    lineno = 0
    for name in ("D", "W", "NNZ"):
        line = docword.readline()
        lineno += 1
        if not line:
            raise CorpusFormatError(f"truncated header, missing {name}", lineno)
        header.append(_header_int(line, lineno, name))
    num_docs, vocab_size, nnz = header

    rows: list[dict[int, int]] = [dict() for _ in range(num_docs)]
    seen = 0
    for line in docword:
        lineno += 1
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise CorpusFormatError(f"expected 'docID wordID count', got {line.strip()!r}", lineno)
        try:
            d, w, c = (int(p) for p in parts)
        except ValueError:
            raise CorpusFormatError(f"non-integer field in {line.strip()!r}", lineno) from None
        if not 1 <= d <= num_docs:
            raise CorpusRangeError(f"docID {d} outside [1, {num_docs}]", lineno)
        if not 1 <= w <= vocab_size:
            raise CorpusRangeError(f"wordID {w} outside [1, {vocab_size}]", lineno)
        if c < 1:
            raise CorpusValueError(f"count {c} < 1", lineno)
        row = rows[d - 1]
        row[w - 1] = row.get(w - 1, 0) + c
        seen += 1
    if seen != nnz:
        raise CorpusFormatError(f"header declares NNZ={nnz} but found {seen} entries", lineno)

    terms = None
    if vocab is not None:
        terms = [t.rstrip("\n") for t in vocab]
        if terms and terms[-1] == "":
            terms.pop()
        if len(terms) != vocab_size:
            raise CorpusValueError(f"vocabulary has {len(terms)} terms, header says W={vocab_size}")
    return Corpus(vocab_size, [sorted(r.items()) for r in rows], terms)


def write_uci_bow(corpus: Corpus, out: TextIO) -> None:
    nnz = sum(len(d) for d in corpus.docs)
    out.write(f"{corpus.num_docs}\n{corpus.vocab_size}\n{nnz}\n")
    for m, doc in enumerate(corpus.docs, start=1):
        for v, c in doc:
            out.write(f"{m} {v + 1} {c}\n")


def load_corpus(path: str | Path, vocab_path: str | Path | None = None) -> Corpus:
    with open(path, encoding="utf-8") as f:
        if vocab_path is None:
            return parse_uci_bow(f)
        with open(vocab_path, encoding="utf-8") as vf:
            return parse_uci_bow(f, vf)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        write_uci_bow(corpus, f)


def split_corpus(corpus: Corpus, test_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    """Seeded shuffle, then the first ``ceil(M * test_fraction)`` go to test.

    Each side keeps the original relative document order.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in [0, 1), got {test_fraction}")
    if corpus.num_docs == 0:
        raise ValueError("cannot split an empty corpus")
    # tolerance keeps 1500 * 0.1 at 150 rather than 151
    n_test = math.ceil(corpus.num_docs * test_fraction - 1e-9)
    perm = np.random.default_rng(seed).permutation(corpus.num_docs)
    test_ids = np.sort(perm[:n_test])
    train_ids = np.sort(perm[n_test:])
    return corpus.subset(train_ids.tolist()), corpus.subset(test_ids.tolist())


def partition_documents(
    train: Corpus, num_workers: int, weights: Sequence[float] | None = None
) -> list[Shard]:
    """Assign documents to workers round-robin by document index.

    With ``weights`` the interleaving is smooth weighted round-robin, so
    shard sizes are proportional to the weights (for heterogeneous CPUs).
    Equal weights reduce to plain round-robin.
    """
    if num_workers < 1:
        raise ValueError(f"num_workers must be >= 1, got {num_workers}")
    owners: list[int]
    if weights is None:
        owners = [m % num_workers for m in range(train.num_docs)]
    else:
        if len(weights) != num_workers or any(w <= 0 for w in weights):
            raise ValueError("weights must be one positive value per worker")
        total = float(sum(weights))
        current = [0.0] * num_workers
        owners = []
        for _ in range(train.num_docs):
            for c in range(num_workers):
                current[c] += weights[c]
            best = max(range(num_workers), key=lambda c: (current[c], -c))
            current[best] -= total
            owners.append(best)
    shards = [Shard(c, [], []) for c in range(num_workers)]
    for m, c in enumerate(owners):
        shards[c].doc_ids.append(m)
        shards[c].docs.append(train.docs[m])
    return shards


def synthetic_corpus(
    num_docs: int,
    vocab_size: int,
    num_topics: int,
    doc_length: int,
    seed: int,
    alpha: float = 0.1,
    smoothing: float = 0.01,
) -> tuple[Corpus, np.ndarray]:
    """Sample a corpus from the LDA generative process.

    Topic ``k`` concentrates on a contiguous block of roughly
    ``vocab_size / num_topics`` terms, mixed with ``smoothing`` of uniform
    mass. Document lengths are Poisson(``doc_length``), at least 1.

    Returns the corpus and the ground-truth topic-word matrix.
    """
    if min(num_docs, vocab_size, num_topics, doc_length) < 1:
        raise ValueError("synthetic corpus parameters must all be >= 1")
    rng = np.random.default_rng(seed)
    blocks = np.array_split(np.arange(vocab_size), num_topics)
    beta = np.full((num_topics, vocab_size), smoothing / vocab_size)
    for k, block in enumerate(blocks):
        if len(block):
            beta[k, block] += (1.0 - smoothing) / len(block)
    beta /= beta.sum(axis=1, keepdims=True)

    docs: list[Document] = []
    for _ in range(num_docs):
        theta = rng.dirichlet(np.full(num_topics, alpha))
        n = max(1, int(rng.poisson(doc_length)))
        topic_counts = rng.multinomial(n, theta)
        counts = np.zeros(vocab_size, dtype=np.int64)
        for k in np.flatnonzero(topic_counts):
            counts += rng.multinomial(topic_counts[k], beta[k])
        nz = np.flatnonzero(counts)
        docs.append([(int(v), int(counts[v])) for v in nz])
    return Corpus(vocab_size, docs), beta


def parse_synthetic_params(text: str) -> tuple[int, int, int, int, int]:
    """Parse ``"M,V,K_true,doc_len,seed"``."""
    parts = text.split(",")
    if len(parts) != 5:
        raise ValueError(f"synthetic parameters must be M,V,K_true,doc_len,seed; got {text!r}")
    m, v, k, length, seed = (int(p) for p in parts)
    return m, v, k, length, seed
