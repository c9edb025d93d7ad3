"""Evaluation metrics: F1, NDCG@k, MSE, MAE, hit rate and intra-list similarity."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np

from mtdqn.errors import ContractError, DegenerateInputError, DimensionError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ContractError(f"confusion counts must be nonnegative: {self}")

    @classmethod
    def from_predictions(cls, predicted: Iterable[bool], actual: Iterable[bool]) -> "ConfusionCounts":
        p = np.asarray(list(predicted), dtype=bool)
        a = np.asarray(list(actual), dtype=bool)
        if p.shape != a.shape:
            raise DimensionError(f"{p.shape[0]} predictions vs {a.shape[0]} labels")
        return cls(
            tp=int(np.sum(p & a)),
            fp=int(np.sum(p & ~a)),
            fn=int(np.sum(~p & a)),
            tn=int(np.sum(~p & ~a)),
        )


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


def precision_recall_f1(c: ConfusionCounts) -> PRF:
    """Precision, recall and their harmonic mean.

    Any 0/0 resolves to 0.0 and sets ``degenerate`` instead of raising.
    """
    degenerate = False
    if c.tp + c.fp == 0:
        precision, degenerate = 0.0, True
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall, degenerate = 0.0, True
    else:
        recall = c.tp / (c.tp + c.fn)
    if precision + recall == 0:
        return PRF(precision, recall, 0.0, True)
    return PRF(precision, recall, 2 * precision * recall / (precision + recall), degenerate)


def dcg_at_k(relevances: Sequence[float], k: int) -> float:
    rel = np.asarray(relevances, dtype=np.float64)[:k]
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum((np.power(2.0, rel) - 1.0) / np.log2(ranks + 1)))


@dataclass(frozen=True)
class RankedList:
    items: tuple[Hashable, ...]
    relevances: tuple[float, ...]

    def __post_init__(self):
        if len(self.items) != len(self.relevances):
            raise DimensionError(f"{len(self.items)} items vs {len(self.relevances)} scores")


def ndcg_at_k(ranked: "RankedList | Sequence[float]", k: int) -> float:
    """NDCG of a ranked list given per-position relevance grades.

    The ideal ordering is the descending sort of the same grades; an
    all-zero list scores 0.0.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    relevances = ranked.relevances if isinstance(ranked, RankedList) else ranked
    rel = np.asarray(relevances, dtype=np.float64)
    if np.any(rel < 0) or not np.all(np.isfinite(rel)):
        raise ContractError("relevance scores must be finite and nonnegative")
    ideal = dcg_at_k(np.sort(rel)[::-1], k)
    if ideal == 0.0:
        return 0.0
    return dcg_at_k(rel, k) / ideal


def _paired(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(y, dtype=np.float64).reshape(-1)
    b = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise DegenerateInputError("need at least one pair")
    return a, b


def mse(y, y_hat) -> float:
    a, b = _paired(y, y_hat)
    return float(np.mean((a - b) ** 2))


def mae(y, y_hat) -> float:
    a, b = _paired(y, y_hat)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class HitRate:
    rate: float
    position_proportions: tuple[float, ...]


def hit_rate_at_k(
    recommended: Sequence[Sequence[Hashable]],
    positives: Sequence[Iterable[Hashable]],
    k: int,
) -> HitRate:
    """Share of lists whose top-k meets the positive set, plus per-position hit shares."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(recommended) != len(positives):
        raise DimensionError(f"{len(recommended)} lists vs {len(positives)} positive sets")
    if not recommended:
        return HitRate(0.0, tuple(0.0 for _ in range(k)))
    hits = 0
    per_position = np.zeros(k)
    for items, pos in zip(recommended, positives):
        pos = set(pos)
        top = list(items)[:k]
        flags = [item in pos for item in top]
        hits += any(flags)
        per_position[: len(flags)] += flags
    n = len(recommended)
    return HitRate(hits / n, tuple(float(x) for x in per_position / n))


def intra_list_similarity(vectors) -> float:
    """Mean pairwise cosine similarity of the item vectors in one list."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInputError("intra-list similarity needs at least 2 items")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("zero vector has no direction")
    u = x / norms[:, None]
    sim = u @ u.T
    n = x.shape[0]
    iu = np.triu_indices(n, k=1)
    return float(np.clip(sim[iu].mean(), -1.0, 1.0))
