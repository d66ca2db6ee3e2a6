"""Weighted ranking loss with sampled rank estimation.

A margin-rank hinge between one relevant and one sampled violating
non-relevant concept, scaled by the harmonic weight of the estimated rank
floor((K-1)/s), where s is the number of sampling tries. The exhaustive
pairwise objective lives here too, but only as an evaluation-side oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError


def weight_L(r: int) -> float:
    """Harmonic rank weight sum_{j=1..r} 1/j; emphasizes the top of the list."""
    if r < 1:
        raise ParameterError(f"rank must be >= 1, got {r}")
    return float(sum(1.0 / j for j in range(1, r + 1)))


def warp_loss(scores: np.ndarray, p: int, n: int, rank: int) -> float:
    """L(rank) * max(0, 1 - Y_p + Y_n)."""
    if p == n:
        raise ParameterError("positive and negative index coincide")
    margin = 1.0 - float(scores[p]) + float(scores[n])
    return weight_L(rank) * max(0.0, margin)


def exhaustive_rank(scores: np.ndarray, p: int) -> int:
    """How many concepts scored strictly better than concept p."""
    scores = np.asarray(scores)
    return int(np.sum(scores > scores[p]))


def exhaustive_objective(scores: np.ndarray, relevant) -> int:
    """Number of (relevant, non-relevant) pairs ranked in the wrong order."""
    scores = np.asarray(scores)
    relevant = set(relevant)
    negatives = [i for i in range(len(scores)) if i not in relevant]
    return int(sum(scores[n] > scores[p] for p in relevant for n in negatives))


@dataclass
class WarpUpdate:
    positive: int
    negative: int | None  # None when no violator was found within budget
    tries: int
    rank_estimate: int
    loss: float
    grad: np.ndarray  # dLoss/dY, length K; nonzero in at most two coordinates


def sample_update(
    scores: np.ndarray,
    relevant,
    seed: int = 0,
    budget: int | None = None,
) -> WarpUpdate:
    """One sampled ranking update for a score vector and its relevant set.

    Draws a positive uniformly, then rejection-samples negatives (uniform,
    with replacement) until one violates the margin or the budget (default
    K-1) runs out. On success the rank is estimated as floor((K-1)/s),
    clamped to >= 1; on exhaustion the update is zero.
    """
    scores = np.asarray(scores, dtype=np.float64)
    k = len(scores)
    relevant = sorted(set(relevant))
    if not relevant or len(relevant) >= k:
        raise ParameterError("relevant set must be a non-empty proper subset of [0,K)")
    negatives = [i for i in range(k) if i not in set(relevant)]
    if budget is None:
        budget = k - 1
    if budget < 1:
        raise ParameterError("budget must be >= 1")
    rng = np.random.default_rng(np.random.PCG64(seed))
    p = relevant[int(rng.integers(len(relevant)))]
    grad = np.zeros(k)
    for s in range(1, budget + 1):
        n = negatives[int(rng.integers(len(negatives)))]
        margin = 1.0 - scores[p] + scores[n]
        if margin > 0.0:
            rank = max(1, (k - 1) // s)
            weight = weight_L(rank)
            grad[p] = -weight
            grad[n] = weight
            return WarpUpdate(p, n, s, rank, weight * margin, grad)
    return WarpUpdate(p, None, budget, 1, 0.0, grad)
