"""Ridge-regularized linear fitted-Q iteration.

Shared by the deliberation Q-ensemble and the off-policy evaluator. The
function class is linear in [state features; action one-hot] plus an
unpenalized intercept. Because rewards are non-positive, true values are
bounded above by zero; predictions are clipped to that bound so reported
value estimates can never drift positive through regression noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LinearQ:
    """Linear action-value model: Q(x, a) = v.x + u_a + c, clipped at 0."""

    state_weights: np.ndarray  # (width,)
    action_offsets: np.ndarray  # (A,)
    intercept: float

    @property
    def n_actions(self) -> int:
        return len(self.action_offsets)

    def values(self, X: np.ndarray) -> np.ndarray:
        """Q(x, a) for every action at every row; shape (n, A), all <= 0."""
        base = X @ self.state_weights + self.intercept
        q = base[:, None] + self.action_offsets[None, :]
        return np.minimum(q, 0.0)


def zero_q(n_actions: int, width: int) -> LinearQ:
    return LinearQ(np.zeros(width), np.zeros(n_actions), 0.0)


def _ridge_solve(Z: np.ndarray, y: np.ndarray, ridge: float) -> np.ndarray:
    """Solve min ||Z theta - y||^2 + ridge*||theta[:-1]||^2 (intercept free)."""
    d = Z.shape[1]
    gram = Z.T @ Z
    penal = np.eye(d) * ridge
    penal[-1, -1] = 0.0
    try:
        return np.linalg.solve(gram + penal, Z.T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"singular fitted-Q design despite ridge={ridge}; "
            "use a positive ridge") from exc


def fit_linear_q(X: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
                 next_idx: np.ndarray, next_probs: np.ndarray, gamma: float,
                 iterations: int, ridge: float) -> LinearQ:
    """Iterate Bellman backups Q <- ridge-fit of r + gamma*E_{a'~pi}[Q(s', a')].

    ``next_probs[i]`` holds the evaluation policy's distribution at step i's
    successor state (rows with next_idx < 0 are terminal and contribute no
    continuation value). Successor states are the dataset's own feature
    rows, indexed by ``next_idx``.
    """
    if ridge <= 0:
        raise ValueError(f"ridge must be positive, got {ridge}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    n = len(X)
    A = next_probs.shape[1]
    onehot = np.zeros((n, A))
    onehot[np.arange(n), actions] = 1.0
    Z = np.hstack([X, onehot, np.ones((n, 1))])
    nonterm = next_idx >= 0
    succ = next_idx[nonterm]
    q = zero_q(A, X.shape[1])
    for _ in range(iterations):
        q_all = q.values(X)
        cont = np.zeros(n)
        cont[nonterm] = (next_probs[nonterm] * q_all[succ]).sum(axis=1)
        y = rewards + gamma * cont
        theta = _ridge_solve(Z, y, ridge)
        q = LinearQ(theta[:X.shape[1]], theta[X.shape[1]:-1], float(theta[-1]))
    return q
