"""Differentiable conformal prediction on a :class:`~rankcp.tensor.Tape`.

Every function here takes node ids and returns node ids so the result can
be fed into :func:`rankcp.tensor.backward`.  Pairwise class comparisons are
expressed as matrix products with constant selector matrices, which keeps
the whole construction inside the kernel's op set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import RankCPError
from .tensor import Tape, stable_sigmoid

__all__ = [
    "SmoothConfig",
    "broadcast_scalar",
    "conformity_loss",
    "smooth_aps_scores",
    "smooth_quantile",
    "smooth_rank_scores",
    "soft_set_size",
    "total_loss",
    "true_class_scores",
]

TAU_RANGE = (1e-3, 10.0)


@dataclass(frozen=True)
class SmoothConfig:
    """Temperatures and weights of the conformal training objective.

    ``tau`` smooths scores and set membership; ``quantile_tau`` smooths the
    soft ranks inside :func:`smooth_quantile`.
    """

    tau: float = 1.0
    kappa: int = 1
    lam: float = 1.0
    alpha: float = 0.05
    quantile_tau: float = 0.01

    def __post_init__(self):
        lo, hi = TAU_RANGE
        for name in ("tau", "quantile_tau"):
            val = getattr(self, name)
            if not lo <= val <= hi:
                raise RankCPError(f"{name}={val} outside [{lo}, {hi}]")
        if self.kappa not in (0, 1):
            raise RankCPError(f"kappa must be 0 or 1, got {self.kappa}")
        if not self.lam >= 0:
            raise RankCPError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.alpha < 1:
            raise RankCPError(f"alpha must lie in (0, 1), got {self.alpha}")


def _check_tau(tau):
    if not tau > 0:
        raise RankCPError(f"temperature must be positive, got {tau}")


@lru_cache(maxsize=32)
def _pair_selectors(k: int):
    """Constant matrices for pairwise class differences.

    ``probs @ diff`` has column ``a*k + b`` equal to ``p_b - p_a``;
    ``probs @ tile`` has that column equal to ``p_b``; ``pairs @ fold`` sums
    each block of ``k`` columns back to class ``a``.
    """
    diff = np.zeros((k, k * k))
    tile = np.zeros((k, k * k))
    fold = np.zeros((k * k, k))
    for a in range(k):
        for b in range(k):
            c = a * k + b
            diff[b, c] += 1.0
            diff[a, c] -= 1.0
            tile[b, c] = 1.0
            fold[c, a] = 1.0
    return diff, tile, fold


def smooth_rank_scores(tape: Tape, probs: int, tau: float) -> int:
    """Soft descending rank of every class: ``sum_j sigmoid((p_j - p_k)/tau)``.

    Returns an (n, K) node.  For distinct probabilities and small ``tau``
    the score of class k tends to its hard rank minus 0.5.
    """
    _check_tau(tau)
    k = tape.value(probs).shape[1]
    diff, _, fold = _pair_selectors(k)
    pairs = tape.apply("matmul", probs, tape.constant(diff))
    sig = tape.apply("sigmoid", tape.apply("divide-by-constant", pairs, c=tau))
    return tape.apply("matmul", sig, tape.constant(fold))


def smooth_aps_scores(tape: Tape, probs: int, tau: float) -> int:
    """Soft cumulative mass ``sum_j sigmoid((p_k - p_j)/tau) * p_j`` per class.

    Returns an (n, K) node; as ``tau`` shrinks, the score of class k tends to
    the mass of classes less likely than k plus half of ``p_k``.  Larger
    scores mean more likely classes.
    """
    _check_tau(tau)
    k = tape.value(probs).shape[1]
    diff, tile, fold = _pair_selectors(k)
    pairs = tape.apply("scale-by-constant", tape.apply("matmul", probs, tape.constant(diff)),
                       c=-1.0 / tau)
    weights = tape.apply("sigmoid", pairs)
    mass = tape.apply("matmul", probs, tape.constant(tile))
    return tape.apply("matmul", tape.apply("multiply", weights, mass), tape.constant(fold))


def true_class_scores(tape: Tape, scores: int, labels) -> int:
    """(n, 1) node picking ``scores[i, labels[i]]``."""
    n, k = tape.value(scores).shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise RankCPError(f"labels length {labels.size} != score rows {n}")
    mask = np.zeros((n, k))
    mask[np.arange(n), labels] = 1.0
    picked = tape.apply("multiply", scores, tape.constant(mask))
    return tape.apply("matmul", picked, tape.constant(np.ones((k, 1))))


def _soft_ranks(values: np.ndarray, tau: float) -> np.ndarray:
    diff = (values[:, None] - values[None, :]) / tau
    return 0.5 + stable_sigmoid(diff).sum(axis=1)


def smooth_quantile(tape: Tape, scores: int, level: float, tau: float) -> int:
    """Differentiable ceil(level * n)-th smallest of an (n, 1) score column.

    Soft ascending ranks ``0.5 + sum_j sigmoid((s_i - s_j)/tau)`` are weighted
    by a triangular kernel of half-width 1 around the target rank, and the
    result is the weighted mean of the scores.  If every weight vanishes the
    half-width is doubled until one does not.
    """
    _check_tau(tau)
    col = tape.value(scores)
    if col.ndim != 2 or col.shape[1] != 1 or col.shape[0] == 0:
        raise RankCPError(f"smooth_quantile expects a non-empty (n, 1) column, got {col.shape}")
    if not 0 < level <= 1:
        raise RankCPError(f"quantile level must lie in (0, 1], got {level}")
    n = col.shape[0]
    target = float(max(1, math.ceil(level * n - 1e-9)))

    ranks_now = _soft_ranks(col[:, 0], tau)
    width = 1.0
    while not np.any(np.abs(ranks_now - target) < width):
        width *= 2.0

    ones_col = tape.constant(np.ones((n, 1)))
    ones_row = tape.constant(np.ones((1, n)))
    s_i = tape.apply("matmul", scores, ones_row)
    s_j = tape.apply("matmul", ones_col, tape.apply("transpose", scores))
    sig = tape.apply("sigmoid", tape.apply("divide-by-constant",
                                           tape.apply("subtract", s_i, s_j), c=tau))
    ranks = tape.apply("add-constant", tape.apply("matmul", sig, ones_col), c=0.5 - target)
    dist = tape.apply("add", tape.apply("relu", ranks),
                      tape.apply("relu", tape.apply("scale-by-constant", ranks, c=-1.0)))
    w = tape.apply("relu", tape.apply("add-constant",
                                      tape.apply("scale-by-constant", dist, c=-1.0 / width),
                                      c=1.0))
    num = tape.apply("sum-all", tape.apply("multiply", w, scores))
    den = tape.apply("sum-all", w)
    return tape.apply("divide", num, den)


def broadcast_scalar(tape: Tape, scalar: int, rows: int, cols: int) -> int:
    """Expand a 1x1 node to (rows, cols) through two explicit products."""
    left = tape.apply("matmul", tape.constant(np.ones((rows, 1))), scalar)
    return tape.apply("matmul", left, tape.constant(np.ones((1, cols))))


def soft_set_size(tape: Tape, scores: int, threshold: int, tau: float, kappa: float,
                  low_in_set: bool = True) -> int:
    """Hinged soft prediction-set size per row, an (n, 1) node.

    ``c_i = max(0, sum_k sigmoid(s (eta - V_ik) / tau) - kappa)`` with
    ``s = +1`` when small scores enter the set and ``s = -1`` otherwise.
    """
    _check_tau(tau)
    n, k = tape.value(scores).shape
    eta = broadcast_scalar(tape, threshold, n, k)
    gap = tape.apply("subtract", eta, scores) if low_in_set else \
        tape.apply("subtract", scores, eta)
    member = tape.apply("sigmoid", tape.apply("divide-by-constant", gap, c=tau))
    size = tape.apply("matmul", member, tape.constant(np.ones((k, 1))))
    return tape.apply("relu", tape.apply("add-constant", size, c=-float(kappa)))


def conformity_loss(tape: Tape, sizes: int, n_classes: int) -> int:
    """Mean soft set size over the fold, divided by the number of classes."""
    if tape.value(sizes).size == 0:
        raise RankCPError("conformity loss over an empty fold")
    return tape.apply("divide-by-constant", tape.apply("mean-all", sizes), c=float(n_classes))


def total_loss(tape: Tape, pred_loss: int, cp_loss: int, lam: float) -> int:
    """``pred_loss + lam * cp_loss``."""
    if not lam >= 0:
        raise RankCPError(f"lambda must be >= 0, got {lam}")
    return tape.apply("add", pred_loss, tape.apply("scale-by-constant", cp_loss, c=float(lam)))
