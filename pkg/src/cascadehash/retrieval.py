"""Binary code generation, packed Hamming ranking and mean average precision."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BinaryCode:
    words: np.ndarray  # uint64, bit b set iff the code's b-th entry is +1
    k: int

    def to_signs(self) -> np.ndarray:
        out = np.empty(self.k)
        for b in range(self.k):
            out[b] = 1.0 if (int(self.words[b // 64]) >> (b % 64)) & 1 else -1.0
        return out


def n_words(k: int) -> int:
    return (k + 63) // 64


def pack_signs(h: np.ndarray) -> np.ndarray:
    """N x k reals -> N x ceil(k/64) uint64; bit set iff h >= 0 (zero maps to +1)."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    n, k = h.shape
    bits = h >= 0
    out = np.zeros((n, n_words(k)), dtype=np.uint64)
    for b in range(k):
        out[:, b // 64] |= bits[:, b].astype(np.uint64) << np.uint64(b % 64)
    return out


def encode(h) -> BinaryCode:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    return BinaryCode(pack_signs(h[None, :])[0], h.size)


def decode(code: BinaryCode) -> np.ndarray:
    return code.to_signs()


def hamming_distance(a: BinaryCode, b: BinaryCode) -> int:
    if a.k != b.k:
        raise ValueError(f"code lengths differ: {a.k} vs {b.k}")
    return int(np.bitwise_count(a.words ^ b.words).sum())


class HashIndex:
    """Immutable database of packed codes with class labels; ids are insertion positions."""

    def __init__(self, words: np.ndarray, labels, k: int):
        words = np.asarray(words, dtype=np.uint64)
        labels = np.asarray(labels, dtype=np.int64)
        if words.ndim != 2 or words.shape[1] != n_words(k):
            raise ValueError(f"packed codes of shape {words.shape} do not hold {k}-bit codes")
        if labels.shape != (words.shape[0],):
            raise ValueError(f"{labels.size} labels for {words.shape[0]} codes")
        self.words = words
        self.labels = labels
        self.k = k
        self.words.setflags(write=False)
        self.labels.setflags(write=False)

    @classmethod
    def from_real(cls, h: np.ndarray, labels) -> "HashIndex":
        h = np.asarray(h, dtype=np.float64)
        return cls(pack_signs(h), labels, h.shape[1])

    def __len__(self) -> int:
        return self.words.shape[0]

    @property
    def ids(self) -> np.ndarray:
        return np.arange(len(self))

    def code(self, i: int) -> BinaryCode:
        return BinaryCode(self.words[i].copy(), self.k)

    def distances(self, query: BinaryCode) -> np.ndarray:
        if query.k != self.k:
            raise ValueError(f"query has {query.k} bits, index has {self.k}")
        return np.bitwise_count(self.words ^ query.words[None, :]).sum(axis=1).astype(np.int64)


def rank_database(query: BinaryCode, index: HashIndex) -> np.ndarray:
    """Ids by ascending Hamming distance, ties by ascending id."""
    return np.argsort(index.distances(query), kind="stable")


def average_precision(relevant) -> float | None:
    """AP of one ranked relevance list; ``None`` when nothing is relevant."""
    rel = np.asarray(relevant, dtype=bool)
    total = int(rel.sum())
    if total == 0:
        return None
    # extended-precision accumulation so the single final rounding is the only error
    hits = np.cumsum(rel).astype(np.longdouble)
    ranks = np.arange(1, rel.size + 1, dtype=np.longdouble)
    return float(np.sum(hits[rel] / ranks[rel]) / total)


@dataclass
class EvalReport:
    ap: list
    map: float
    k: int
    n_q: int
    n_skipped: int = 0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "schema": "cascadehash.eval/1",
            "mAP": self.map,
            "k": self.k,
            "n_q": self.n_q,
            "n_skipped": self.n_skipped,
            "seconds": self.seconds,
            "ap": self.ap,
        }
        d.update(self.extra)
        return d


def mean_average_precision(
    query_words: np.ndarray,
    query_labels,
    index: HashIndex,
    exclude_self: bool = False,
) -> EvalReport:
    """mAP of the queries ranked against ``index``.

    Queries with no relevant database item are skipped and counted in
    ``n_skipped``.  With ``exclude_self`` the i-th query is removed from the
    i-th database slot (query set == database set).
    """
    start = time.perf_counter()
    query_words = np.asarray(query_words, dtype=np.uint64)
    query_labels = np.asarray(query_labels, dtype=np.int64)
    nq = query_words.shape[0]
    if nq == 0:
        raise ValueError("empty query set")
    if exclude_self and nq != len(index):
        raise ValueError("self-match exclusion needs the query set to be the database")
    aps, skipped = [], 0
    for i in range(nq):
        order = rank_database(BinaryCode(query_words[i], index.k), index)
        if exclude_self:
            order = order[order != i]
        ap = average_precision(index.labels[order] == query_labels[i])
        if ap is None:
            skipped += 1
            continue
        aps.append(ap)
    if skipped:
        logger.warning("%d queries without relevant database items were skipped", skipped)
    if not aps:
        raise ValueError("no query has a relevant database item")
    return EvalReport(
        ap=aps,
        map=float(np.mean(aps)),
        k=index.k,
        n_q=nq,
        n_skipped=skipped,
        seconds=time.perf_counter() - start,
    )


def evaluate_codes(query_h, query_labels, db_h, db_labels, exclude_self: bool = False) -> EvalReport:
    """Convenience wrapper over real-valued (pre-sign) code matrices, rows = samples."""
    index = HashIndex.from_real(db_h, db_labels)
    return mean_average_precision(pack_signs(query_h), query_labels, index, exclude_self)
