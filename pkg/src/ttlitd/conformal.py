"""Split-conformal thresholds and local kNN calibration.

The global threshold tau is the ceil((n+1)(1-alpha))-th smallest
calibration risk score. Local calibration queries an exact kNN index over
z-scored calibration states and applies the same order statistic to each
action's counterfactual risk scores within the neighborhood, yielding
per-action thresholds tau_s(a) and the neighborhood's logged-action
frequencies.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import FeatureMap, Transitions, feature_matrix
from .risk import RiskModel, p_harm_matrix

#: Sentinel meaning "calibration insufficient; mask nothing". Ordered above
#: every finite threshold, and p >= NO_GATE is false for all finite p.
NO_GATE = math.inf

_CHUNK = 2048  # query rows per distance block in batched kNN


@dataclass(frozen=True)
class CalibrationIndex:
    """Frozen calibration slice: z-scored states plus precomputed risk scores."""

    points: np.ndarray  # (n, width) z-scored feature rows
    taken_actions: np.ndarray  # (n,) logged action per calibration point
    taken_scores: np.ndarray  # (n,) p_harm at the logged action
    per_action_scores: np.ndarray  # (n, A) counterfactual p_harm for every action

    def __post_init__(self):
        n = len(self.points)
        if not (len(self.taken_actions) == len(self.taken_scores)
                == len(self.per_action_scores) == n):
            raise ValueError("calibration index field lengths disagree")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n_actions(self) -> int:
        return self.per_action_scores.shape[1]


def build_calibration_index(cal: Transitions, fm: FeatureMap,
                            risk: RiskModel) -> CalibrationIndex:
    """Score the calibration split under the risk model and freeze the index."""
    X = feature_matrix(fm, cal)
    per_action = p_harm_matrix(risk, X)
    taken = per_action[np.arange(len(cal)), cal.actions]
    return CalibrationIndex(
        points=X,
        taken_actions=cal.actions.copy(),
        taken_scores=taken,
        per_action_scores=per_action,
    )


def conformal_rank(n: int, alpha: float) -> int:
    """The split-conformal order statistic ceil((n+1)(1-alpha)); may exceed n."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    # tiny guard against upward float drift on exact-integer products
    return int(math.ceil((n + 1) * (1.0 - alpha) - 1e-12))


def global_tau(scores, alpha: float) -> float:
    """Finite-sample split-conformal threshold over calibration scores.

    Returns the k-th smallest score with k = ceil((n+1)(1-alpha)); when
    k > n the calibration set is too small for the requested level and the
    NO_GATE sentinel is returned with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot compute a conformal threshold from zero scores")
    k = conformal_rank(scores.size, alpha)
    if k > scores.size:
        warnings.warn(
            f"degenerate calibration: need rank {k} of {scores.size} scores "
            f"at alpha={alpha}; gating disabled")
        return NO_GATE
    return float(np.partition(scores, k - 1)[k - 1])


def knn(index: CalibrationIndex, x: np.ndarray, k: int) -> np.ndarray:
    """Exact K nearest calibration points by Euclidean distance.

    Ties break toward the lower calibration index. K is clamped (with a
    warning) when it exceeds the index size.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n = len(index)
    if k > n:
        warnings.warn(f"K={k} exceeds calibration size {n}; clamping")
        k = n
    d2 = ((index.points - x) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")
    return order[:k]


def knn_batch(index: CalibrationIndex, X: np.ndarray, k: int) -> np.ndarray:
    """Neighbor ids for every row of X; shape (len(X), K). Same tie rule as knn."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    n = len(index)
    if k > n:
        warnings.warn(f"K={k} exceeds calibration size {n}; clamping")
        k = n
    pts = index.points
    pt_sq = (pts ** 2).sum(axis=1)
    out = np.empty((len(X), k), dtype=np.int64)
    for lo in range(0, len(X), _CHUNK):
        chunk = X[lo:lo + _CHUNK]
        d2 = (chunk ** 2).sum(axis=1)[:, None] - 2.0 * (chunk @ pts.T) + pt_sq[None, :]
        out[lo:lo + _CHUNK] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


@dataclass(frozen=True)
class LocalThresholds:
    """Per-action local thresholds and the neighborhood's action prior."""

    tau_local: np.ndarray  # (A,) thresholds, possibly NO_GATE entries
    neighbor_ids: np.ndarray  # (K,)
    action_freq: np.ndarray  # (A,) relative frequency of logged actions


def local_thresholds(index: CalibrationIndex, x: np.ndarray, k: int,
                     alpha: float) -> LocalThresholds:
    """TTL adapter for one query state.

    For each action the threshold is the split-conformal order statistic of
    the K neighbors' counterfactual risk scores for that action; the action
    prior is the empirical distribution of the neighbors' logged actions.
    """
    ids = knn(index, x, k)
    kk = len(ids)
    rank = conformal_rank(kk, alpha)
    A = index.n_actions
    if rank > kk:
        warnings.warn(
            f"degenerate local calibration: need rank {rank} of {kk} neighbors "
            f"at alpha={alpha}; gating disabled")
        tau = np.full(A, NO_GATE)
    else:
        neigh = index.per_action_scores[ids]  # (K, A)
        tau = np.partition(neigh, rank - 1, axis=0)[rank - 1]
    freq = np.bincount(index.taken_actions[ids], minlength=A) / kk
    return LocalThresholds(tau_local=tau, neighbor_ids=ids, action_freq=freq)


def neighbor_action_freq(index: CalibrationIndex, X: np.ndarray,
                         k: int) -> np.ndarray:
    """Per-row neighborhood action frequencies only; shape (n, A)."""
    ids = knn_batch(index, X, k)
    taken = index.taken_actions[ids]
    A = index.n_actions
    return np.stack([(taken == a).sum(axis=1) for a in range(A)], axis=1) / ids.shape[1]


def local_thresholds_batch(index: CalibrationIndex, X: np.ndarray, k: int,
                           alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized local thresholds and action priors for many query rows.

    Returns (tau (n, A), freq (n, A)); identical per row to local_thresholds.
    """
    ids = knn_batch(index, X, k)
    kk = ids.shape[1]
    rank = conformal_rank(kk, alpha)
    n = len(X)
    A = index.n_actions
    if rank > kk:
        warnings.warn(
            f"degenerate local calibration: need rank {rank} of {kk} neighbors "
            f"at alpha={alpha}; gating disabled")
        tau = np.full((n, A), NO_GATE)
    else:
        tau = np.empty((n, A))
        for a in range(A):
            gathered = index.per_action_scores[:, a][ids]  # (n, K)
            tau[:, a] = np.partition(gathered, rank - 1, axis=1)[:, rank - 1]
    taken = index.taken_actions[ids]  # (n, K)
    freq = np.stack([(taken == a).sum(axis=1) for a in range(A)], axis=1) / kk
    return tau, freq
