"""Bootstrap ensemble of linear fitted-Q models.

Each member trains on an episode-level bootstrap resample (with
replacement, same episode count) and runs a fixed number of Bellman
sweeps. The ensemble exposes the per-(state, action) mean and sample
standard deviation used by the deliberation score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureMap, Transitions, feature_matrix
from .fittedq import LinearQ, fit_linear_q


@dataclass(frozen=True)
class QEnsemble:
    members: tuple[LinearQ, ...]
    gamma: float
    iterations: int

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def n_actions(self) -> int:
        return self.members[0].n_actions


def fit_ensemble(tr: Transitions, fm: FeatureMap, policy, n_actions: int,
                 members: int = 10, gamma: float = 0.99, iterations: int = 10,
                 ridge: float = 1e-4, seed: int | None = 0) -> QEnsemble:
    """Train the ensemble under the given evaluation policy.

    ``policy`` maps a feature matrix (n, width) to action probabilities
    (n, A); it is evaluated once on the successor states and shared across
    members. Member resamples draw episode indices with replacement from
    per-member seeds derived from ``seed``, so fits are order-independent
    and reproducible.
    """
    if members < 2:
        raise ValueError(f"ensemble needs at least 2 members, got {members}")
    if len(tr) == 0:
        raise ValueError("cannot fit a Q-ensemble on zero episodes")
    X = feature_matrix(fm, tr)
    nonterm = tr.next_idx >= 0
    next_probs = np.zeros((len(tr), n_actions))
    if nonterm.any():
        next_probs[nonterm] = policy(X[tr.next_idx[nonterm]])

    n_ep = tr.n_episodes
    ep_rows = [np.flatnonzero(tr.episode_id == e) for e in range(n_ep)]
    child_seeds = np.random.SeedSequence(seed).spawn(members)
    fitted = []
    for m in range(members):
        rng = np.random.default_rng(child_seeds[m])
        chosen = rng.integers(0, n_ep, size=n_ep)
        rows = np.concatenate([ep_rows[e] for e in chosen])
        # remap next links into the resampled row space
        local_next = np.full(len(rows), -1, dtype=np.int64)
        pos = 0
        for e in chosen:
            block = ep_rows[e]
            L = len(block)
            local_next[pos:pos + L - 1] = np.arange(pos + 1, pos + L)
            pos += L
        fitted.append(
            fit_linear_q(X[rows], tr.actions[rows], tr.rewards[rows],
                         local_next, next_probs[rows], gamma, iterations, ridge))
    return QEnsemble(members=tuple(fitted), gamma=gamma, iterations=iterations)


def q_stats(ens: QEnsemble, x: np.ndarray, action: int) -> tuple[float, float]:
    """Ensemble mean and sample std (ddof=1) of Q(x, action)."""
    vals = np.array([m.values(x[None, :])[0, action] for m in ens.members])
    return float(vals.mean()), float(vals.std(ddof=1))


def q_stats_matrix(ens: QEnsemble, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-action ensemble mean and std for every row; each (n, A)."""
    stacked = np.stack([m.values(X) for m in ens.members])  # (M, n, A)
    return stacked.mean(axis=0), stacked.std(axis=0, ddof=1)
