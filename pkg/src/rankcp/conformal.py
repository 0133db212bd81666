"""Split conformal prediction with threshold, adaptive and rank-based scores.

Ranks are descending throughout: rank 1 is the largest probability.  Ties
are broken toward the smaller class index unless a random generator is
supplied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .exceptions import CalibrationError, RankCPError

__all__ = [
    "PredictionSetBatch",
    "RankCalibration",
    "ScoreKind",
    "aps_scores",
    "build_sets",
    "calibrate",
    "calibrate_threshold",
    "coverage",
    "descending_order",
    "fit_rank_calibration",
    "in_row_ranks",
    "inefficiency",
    "score_aps",
    "score_rank_calib",
    "score_thr",
]

_EPS = 1e-9


class ScoreKind(str, Enum):
    THR = "thr"
    APS = "aps"
    RANK = "rank"

    @property
    def low_in_set(self) -> bool:
        """True when a class enters the set by having a *small* score."""
        return self is not ScoreKind.THR

    @classmethod
    def parse(cls, value) -> "ScoreKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise RankCPError(f"unknown score kind {value!r}; expected thr, aps or rank") from None


def _check_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.ndim != 2 or probs.shape[1] < 1:
        raise RankCPError(f"probabilities must be an (n, K) array, got shape {probs.shape}")
    return probs


def descending_order(probs, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Per-row class indices sorted by decreasing probability.

    Ties go to the smaller class index, or are shuffled uniformly when ``rng``
    is given.
    """
    probs = _check_probs(probs)
    if rng is None:
        return np.argsort(-probs, axis=1, kind="stable")
    n, k = probs.shape
    shuffle = np.argsort(rng.random((n, k)), axis=1)
    shuffled = np.take_along_axis(probs, shuffle, axis=1)
    inner = np.argsort(-shuffled, axis=1, kind="stable")
    return np.take_along_axis(shuffle, inner, axis=1)


def in_row_ranks(probs, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """(n, K) array holding the descending rank (1..K) of every class."""
    order = descending_order(probs, rng)
    ranks = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    ranks[rows, order] = np.arange(1, order.shape[1] + 1)
    return ranks


def _check_class(probs_row, k):
    row = np.asarray(probs_row, dtype=np.float64).ravel()
    if not 0 <= k < row.size:
        raise RankCPError(f"class {k} outside [0, {row.size})")
    return row


def score_thr(probs_row, k: int) -> float:
    """Threshold score: the class probability itself."""
    return float(_check_class(probs_row, k)[k])


def aps_scores(probs, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """(n, K) cumulative descending-sorted mass up to and including each class."""
    probs = _check_probs(probs)
    order = descending_order(probs, rng)
    cum = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    out = np.empty_like(cum)
    np.put_along_axis(out, order, cum, axis=1)
    return out


def score_aps(probs_row, k: int) -> float:
    """Adaptive score of class ``k``: sorted cumulative mass through ``k``."""
    row = _check_class(probs_row, k)
    return float(aps_scores(row)[0, k])


def score_rank_calib(probs, labels) -> np.ndarray:
    """Rank-based conformity scores of the true labels on a calibration set.

    ``V_i = (in-row rank of the true class) - 1 + (column rank)/n`` where the
    column rank places ``probs[i, y_i]`` among ``probs[:, y_i]`` (descending,
    ties toward the smaller node index).
    """
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n = probs.shape[0]
    if n == 0:
        raise RankCPError("calibration set is empty")
    if labels.shape != (n,):
        raise RankCPError(f"labels length {labels.size} != calibration size {n}")
    row_rank = in_row_ranks(probs)[np.arange(n), labels]
    true_p = probs[np.arange(n), labels]
    col = probs[:, labels]  # col[j, i] = probs[j, y_i]
    idx = np.arange(n)
    ahead = (col > true_p[None, :]) | ((col == true_p[None, :]) & (idx[:, None] < idx[None, :]))
    col_rank = 1 + ahead.sum(axis=0)
    return row_rank - 1 + col_rank / n


def _order_stat_index(position: float, n: int, alpha: float, what: str) -> int:
    k = int(math.ceil(position - _EPS))
    if k > n:
        need = int(math.ceil((1 - alpha) / alpha - _EPS))
        raise CalibrationError(
            f"{what}: calibration size {n} too small for alpha={alpha}; need n >= {need}")
    return max(k, 1)


def _rank_quantile_index(n: int, alpha: float) -> int:
    """Descending position floor((n+1) * alpha), validated to be >= 1."""
    k = int(math.floor((n + 1) * alpha + _EPS))
    if k < 1:
        need = int(math.ceil(1 / alpha - 1 - _EPS))
        raise CalibrationError(
            f"calibration size {n} too small for alpha={alpha}; need n >= {need}")
    return k


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise RankCPError(f"alpha must lie in (0, 1), got {alpha}")


def calibrate_threshold(scores, alpha: float, kind) -> float:
    """Finite-sample corrected empirical quantile of calibration scores.

    THR uses level ``alpha (1 + 1/n)``, APS ``(1 - alpha)(1 + 1/n)``; the
    q-level quantile of n values is the ceil(q n)-th smallest.  RANK takes the
    floor((n+1) alpha)-th largest score.
    """
    kind = ScoreKind.parse(kind)
    _check_alpha(alpha)
    scores = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = scores.size
    if n == 0:
        raise RankCPError("no calibration scores")
    if kind is ScoreKind.RANK:
        return float(scores[n - _rank_quantile_index(n, alpha)])
    level = alpha if kind is ScoreKind.THR else 1.0 - alpha
    k = _order_stat_index(level * (1 + 1 / n) * n, n, alpha, kind.value.upper())
    return float(scores[k - 1])


@dataclass(frozen=True)
class RankCalibration:
    """Fitted rank-threshold calibration.

    Nodes get their top ``r_star`` classes when their ``r_star``-th largest
    probability is at least ``mu_star``, otherwise their top ``r_star - 1``.
    ``p`` is the fraction of calibration nodes sent to the larger set.
    """

    r_star: int
    mu_star: float
    p: float
    q_score: float
    n_calib: int
    alpha: float


def fit_rank_calibration(probs, labels, alpha: float) -> RankCalibration:
    """Fit the rank threshold and probability cutoff on calibration data.

    ``r_star`` is the floor((n+1) alpha)-th largest true-class rank.  The
    cutoff ``mu_star`` is the ceil(n p)-th largest r_star-th order statistic
    across calibration nodes, where ``p`` is the smallest inclusion
    proportion whose replay covers at least ceil(n (1 - alpha)) calibration
    labels.
    """
    _check_alpha(alpha)
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if n == 0:
        raise RankCPError("calibration set is empty")
    if labels.shape != (n,):
        raise RankCPError(f"labels length {labels.size} != calibration size {n}")
    ranks = in_row_ranks(probs)[np.arange(n), labels]
    j = _rank_quantile_index(n, alpha)
    r_star = int(np.sort(ranks)[::-1][j - 1])

    target = int(math.ceil(n * (1 - alpha) - _EPS))
    already = int((ranks <= r_star - 1).sum())
    order = descending_order(probs)
    mu_r = probs[np.arange(n), order[:, r_star - 1]]
    by_mu = np.argsort(-mu_r, kind="stable")
    # Nodes in descending mu_r order; each gains coverage iff its rank is r_star.
    gained = np.cumsum(ranks[by_mu] == r_star)
    if already >= target:
        m = 0
    else:
        m = int(np.searchsorted(gained, target - already) + 1)
        # Ties in mu_r include every tied node, so align m to the tie block.
        cut = mu_r[by_mu[m - 1]]
        m = int((mu_r >= cut).sum())
    mu_star = math.inf if m == 0 else float(mu_r[by_mu[m - 1]])
    q_score = calibrate_threshold(score_rank_calib(probs, labels), alpha, ScoreKind.RANK)
    return RankCalibration(r_star=r_star, mu_star=mu_star, p=m / n, q_score=q_score,
                           n_calib=n, alpha=alpha)


def calibrate(probs, labels, alpha: float, kind) -> Union[float, RankCalibration]:
    """Threshold (THR/APS) or :class:`RankCalibration` (RANK) from calibration data."""
    kind = ScoreKind.parse(kind)
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.int64)
    if kind is ScoreKind.RANK:
        return fit_rank_calibration(probs, labels, alpha)
    rows = np.arange(probs.shape[0])
    if kind is ScoreKind.THR:
        scores = probs[rows, labels]
    else:
        scores = aps_scores(probs)[rows, labels]
    return calibrate_threshold(scores, alpha, kind)


@dataclass(frozen=True)
class PredictionSetBatch:
    """Boolean (n, K) class-membership masks for a batch of nodes."""

    masks: np.ndarray
    alpha: float

    @property
    def sizes(self) -> np.ndarray:
        return self.masks.sum(axis=1)

    def __len__(self):
        return self.masks.shape[0]

    def members(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.masks[i])

    def to_csv(self, path, node_ids=None, labels=None) -> Path:
        """Write ``node_id,set_size,members,covered`` rows (covered if labels given)."""
        path = Path(path)
        ids = np.arange(len(self)) if node_ids is None else np.asarray(node_ids)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("node_id,set_size,members" + (",covered" if labels is not None else "") + "\n")
            for i, node in enumerate(ids):
                members = ";".join(str(c) for c in self.members(i))
                line = f"{node},{int(self.sizes[i])},{members}"
                if labels is not None:
                    line += f",{int(self.masks[i, labels[i]])}"
                fh.write(line + "\n")
        return path


def build_sets(probs, calibration, kind, alpha: float = float("nan"),
               force_top1: bool = False) -> PredictionSetBatch:
    """Prediction sets from probabilities and a fitted calibration.

    ``calibration`` is the threshold for THR/APS or a :class:`RankCalibration`.
    Empty sets are kept unless ``force_top1`` adds the arg-max class.
    """
    kind = ScoreKind.parse(kind)
    probs = _check_probs(probs)
    n, k = probs.shape
    if kind is ScoreKind.RANK:
        if not isinstance(calibration, RankCalibration):
            raise RankCPError("RANK sets need a RankCalibration")
        alpha = calibration.alpha
        r = calibration.r_star
        if r > k:
            raise RankCPError(f"r_star={r} exceeds number of classes {k}")
        ranks = in_row_ranks(probs)
        order = descending_order(probs)
        mu_r = probs[np.arange(n), order[:, r - 1]]
        size = np.where(mu_r >= calibration.mu_star, r, r - 1)
        masks = ranks <= size[:, None]
    else:
        eta = float(calibration)
        if kind is ScoreKind.THR:
            masks = probs >= eta
        else:
            masks = aps_scores(probs) <= eta
    if force_top1:
        masks = masks.copy()
        masks[np.arange(n), descending_order(probs)[:, 0]] = True
    masks.setflags(write=False)
    return PredictionSetBatch(masks, alpha)


def coverage(sets: PredictionSetBatch, labels) -> float:
    """Fraction of nodes whose prediction set contains the true label."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(sets) == 0:
        raise RankCPError("empty prediction-set batch")
    if labels.shape != (len(sets),):
        raise RankCPError(f"labels length {labels.size} != batch size {len(sets)}")
    return float(sets.masks[np.arange(len(sets)), labels].mean())


def inefficiency(sets: PredictionSetBatch) -> float:
    """Mean prediction-set size."""
    if len(sets) == 0:
        raise RankCPError("empty prediction-set batch")
    return float(sets.sizes.mean())
