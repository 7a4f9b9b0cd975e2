"""Distance metrics, rank-k identification accuracy, and CMC curves.

Scores follow a single convention everywhere: lower is better. Cosine
similarity is therefore reported as cosine distance (one minus the
similarity). The flat linear-scan identifier here is the reference the
matching tree is checked against, so it deliberately stays a plain loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionMismatch(Exception):
    pass


class ZeroVector(Exception):
    pass


class EmptyResults(Exception):
    pass


def _check_dims(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def euclidean(a: np.ndarray, b: np.ndarray) -> float:
    """Euclidean distance between two equal-dimension vectors."""
    a, b = _check_dims(a, b)
    diff = a - b
    return float(math.sqrt(float(np.dot(diff, diff))))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """One minus cosine similarity; 0 for parallel vectors, 2 for
    antiparallel. Undefined for zero-norm inputs."""
    a, b = _check_dims(a, b)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine distance is undefined for zero vectors")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


METRICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "euclidean": euclidean,
    "cosine": cosine_distance,
}


def get_metric(name: str) -> Callable[[np.ndarray, np.ndarray], float]:
    try:
        return METRICS[name]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}, expected one of {sorted(METRICS)}")


@dataclass(frozen=True)
class MatchScore:
    identity: str
    score: float
    metric: str


def flat_oracle_identify(gallery, probe: np.ndarray, metric: str) -> MatchScore:
    """Linear-scan nearest template over the whole gallery.

    Ties break to the lowest gallery index. This is the ground-truth path
    used to validate the matching tree, so it stays a simple scan.
    """
    fn = get_metric(metric)
    best_score = None
    best_identity = None
    for entry in gallery:
        s = fn(entry.vector, probe)
        if best_score is None or s < best_score:
            best_score = s
            best_identity = entry.identity
    if best_score is None:
        raise EmptyResults("empty gallery")
    return MatchScore(identity=best_identity, score=best_score, metric=metric)


def flat_rank(gallery, probe: np.ndarray, metric: str) -> list[MatchScore]:
    """All gallery entries scored and sorted ascending, ties by index."""
    fn = get_metric(metric)
    scored = [
        (fn(entry.vector, probe), idx, entry.identity)
        for idx, entry in enumerate(gallery)
    ]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [MatchScore(identity=ident, score=s, metric=metric) for s, _, ident in scored]


def rank_k_accuracy(
    results: Sequence[Sequence[MatchScore]], truth: Sequence[str], k: int
) -> float:
    """Fraction of probes whose true identity appears in the top ``k``
    candidates. ``results`` holds one ascending-sorted candidate list per
    probe."""
    if k < 1:
        raise ValueError(f"rank must be >= 1, got {k}")
    if not results:
        raise EmptyResults("no probe results")
    if len(results) != len(truth):
        raise ValueError("results and truth lengths differ")
    hits = 0
    for candidates, label in zip(results, truth):
        top = candidates[:k]
        if any(c.identity == label for c in top):
            hits += 1
    return hits / len(results)


@dataclass(frozen=True)
class CMCData:
    """Cumulative match characteristics: accuracy at ranks 1..R."""

    ranks: tuple[int, ...]
    accuracy: tuple[float, ...]

    def at(self, rank: int) -> float:
        return self.accuracy[self.ranks.index(rank)]


def cmc_curve(
    results: Sequence[Sequence[MatchScore]], truth: Sequence[str], max_rank: int
) -> CMCData:
    """Accuracy at every rank from 1 to ``max_rank``; non-decreasing by
    construction."""
    ranks = tuple(range(1, max_rank + 1))
    accuracy = tuple(rank_k_accuracy(results, truth, r) for r in ranks)
    return CMCData(ranks=ranks, accuracy=accuracy)
