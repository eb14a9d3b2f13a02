"""Off-policy evaluation: FQE, doubly robust estimation, resampling stats.

Value estimates carry percentile-bootstrap confidence intervals over
per-episode values, so policies can also be compared pairwise on the same
episodes (paired bootstrap and a sign-flip randomization test).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Episode, FeatureMap, Transitions, feature_matrix, flatten
from .fittedq import LinearQ, fit_linear_q

PolicyFn = Callable[[np.ndarray], np.ndarray]  # (n, width) -> (n, A) probabilities

_RATIO_FLOOR = 1e-3  # importance-weight clipping floor for near-zero behavior probs


@dataclass(frozen=True)
class ValueEstimate:
    """Point estimate of policy value with a bootstrap CI over episodes."""

    v0: float
    ci_low: float
    ci_high: float
    method: str  # "fqe" or "dr"
    n_episodes: int
    seed: int | None
    episode_values: np.ndarray = field(repr=False, default=None)


def _bootstrap_ci(values: np.ndarray, n_boot: int, seed: int | None
                  ) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n = len(values)
    idx = rng.integers(0, n, size=(n_boot, n))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [0.025, 0.975])
    return float(lo), float(hi)


def fqe_model(episodes: Sequence[Episode], fm: FeatureMap, policy: PolicyFn,
              n_actions: int, gamma: float = 0.99, iterations: int = 15,
              ridge: float = 1e-4) -> tuple[LinearQ, np.ndarray]:
    """Fit the FQE model and return (model, per-episode start values)."""
    if not episodes:
        raise ValueError("FQE needs at least one episode")
    tr = flatten(episodes)
    X = feature_matrix(fm, tr)
    nonterm = tr.next_idx >= 0
    next_probs = np.zeros((len(tr), n_actions))
    if nonterm.any():
        next_probs[nonterm] = policy(X[tr.next_idx[nonterm]])
    q = fit_linear_q(X, tr.actions, tr.rewards, tr.next_idx, next_probs,
                     gamma, iterations, ridge)
    start_X = X[tr.start_idx]
    ep_values = (policy(start_X) * q.values(start_X)).sum(axis=1)
    return q, ep_values


def fqe(episodes: Sequence[Episode], fm: FeatureMap, policy: PolicyFn,
        n_actions: int, gamma: float = 0.99, iterations: int = 15,
        ridge: float = 1e-4, n_boot: int = 2000,
        seed: int | None = 0) -> ValueEstimate:
    """Fitted Q evaluation: v0 = mean over episodes of E_{a~pi} Q(s0, a)."""
    _, ep_values = fqe_model(episodes, fm, policy, n_actions, gamma=gamma,
                             iterations=iterations, ridge=ridge)
    lo, hi = _bootstrap_ci(ep_values, n_boot, seed)
    return ValueEstimate(float(ep_values.mean()), lo, hi, "fqe",
                         len(ep_values), seed, ep_values)


def dr_episode_values(episodes: Sequence[Episode], fm: FeatureMap,
                      policy: PolicyFn, behavior: PolicyFn,
                      q_values: Callable[[np.ndarray], np.ndarray],
                      gamma: float = 0.99) -> np.ndarray:
    """Per-episode doubly robust values via the step-wise recursion

        V_t = E_{a~pi} Q(s_t, a) + rho_t * (r_t + gamma*V_{t+1} - Q(s_t, a_t))

    with rho_t = pi(a_t|s_t)/b(a_t|s_t) and V after the final step = 0.
    """
    tr = flatten(episodes)
    X = feature_matrix(fm, tr)
    pi_probs = policy(X)
    b_probs = behavior(X)
    rows = np.arange(len(tr))
    pi_taken = pi_probs[rows, tr.actions]
    b_taken = b_probs[rows, tr.actions]
    if (b_taken <= 0).any():
        i = int(np.flatnonzero(b_taken <= 0)[0])
        raise ValueError(
            f"behavior probability is zero on logged action {tr.actions[i]} "
            f"(member {tr.member_ids[i]}, t={tr.t[i]}); DR is undefined off-support")
    if (b_taken < _RATIO_FLOOR).any():
        warnings.warn(
            f"{int((b_taken < _RATIO_FLOOR).sum())} logged actions have behavior "
            f"probability below {_RATIO_FLOOR}; clipping importance weights")
        b_taken = np.maximum(b_taken, _RATIO_FLOOR)
    rho = pi_taken / b_taken
    q_all = q_values(X)
    eq = (pi_probs * q_all).sum(axis=1)
    q_taken = q_all[rows, tr.actions]

    values = np.empty(tr.n_episodes)
    for e in range(tr.n_episodes):
        idx = np.flatnonzero(tr.episode_id == e)
        v = 0.0
        for i in idx[::-1]:
            v = eq[i] + rho[i] * (tr.rewards[i] + gamma * v - q_taken[i])
        values[e] = v
    return values


def dr_estimate(episodes: Sequence[Episode], fm: FeatureMap, policy: PolicyFn,
                behavior: PolicyFn, q_values: Callable[[np.ndarray], np.ndarray],
                gamma: float = 0.99, n_boot: int = 2000,
                seed: int | None = 0) -> ValueEstimate:
    """Doubly robust policy-value estimate with a bootstrap CI."""
    ep_values = dr_episode_values(episodes, fm, policy, behavior, q_values, gamma)
    lo, hi = _bootstrap_ci(ep_values, n_boot, seed)
    return ValueEstimate(float(ep_values.mean()), lo, hi, "dr",
                         len(ep_values), seed, ep_values)


def paired_bootstrap(returns_a, returns_b, n_boot: int = 2000,
                     seed: int | None = 0) -> dict:
    """Percentile 95% CI for mean(a - b) under episode-level resampling."""
    a = np.asarray(returns_a, dtype=np.float64)
    b = np.asarray(returns_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired returns disagree in length: {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise ValueError("paired bootstrap needs at least 2 episodes")
    diffs = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(diffs), size=(n_boot, len(diffs)))
    means = diffs[idx].mean(axis=1)
    lo, hi = np.quantile(means, [0.025, 0.975])
    return {"delta_mean": float(diffs.mean()), "ci_low": float(lo), "ci_high": float(hi)}


def randomization_test(returns_a, returns_b, n_perm: int = 5000,
                       seed: int | None = 0) -> float:
    """Two-sided paired sign-flip test on per-episode return differences.

    p = (1 + #{|T_perm| >= |T_obs|}) / (R + 1) with T = mean of signed
    differences; identical inputs give p = 1.0 exactly.
    """
    a = np.asarray(returns_a, dtype=np.float64)
    b = np.asarray(returns_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired returns disagree in length: {a.shape} vs {b.shape}")
    if len(a) < 2:
        raise ValueError("randomization test needs at least 2 episodes")
    diffs = a - b
    t_obs = abs(diffs.mean())
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(n_perm, len(diffs))) * 2 - 1
    t_perm = np.abs((signs * diffs).mean(axis=1))
    return float((1 + (t_perm >= t_obs).sum()) / (n_perm + 1))
