"""Base action-preference policy and the TTL probability blend.

The preference model is a multinomial logistic regression trained on the
conformally safe subset of the training split (steps whose logged action
scored below the global threshold). At inference its probabilities are
blended with the kNN neighborhood's action frequencies.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import FeatureMap, Transitions, ValidationError, feature_matrix
from .risk import RiskModel, p_harm_matrix


@dataclass(frozen=True)
class PreferenceModel:
    """Multinomial logistic policy: probs = softmax(W x + b)."""

    weights: np.ndarray  # (A, width)
    biases: np.ndarray  # (A,)
    converged: bool = True
    epochs_run: int = 0
    final_grad_norm: float = 0.0

    @property
    def n_actions(self) -> int:
        return len(self.biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_probs(model: PreferenceModel, X: np.ndarray) -> np.ndarray:
    """Action probabilities for every row of X; shape (n, A)."""
    return softmax(X @ model.weights.T + model.biases)


def multinomial_nll_loss(weights: np.ndarray, biases: np.ndarray, X: np.ndarray,
                         y: np.ndarray, l2: float) -> float:
    """Mean negative log-likelihood plus an L2 penalty on weights (not biases)."""
    logits = X @ weights.T + biases
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    nll = logz - logits[np.arange(len(y)), y]
    return float(nll.mean() + l2 * (weights ** 2).sum())


def multinomial_nll_grad(weights: np.ndarray, biases: np.ndarray, X: np.ndarray,
                         y: np.ndarray, l2: float) -> tuple[np.ndarray, np.ndarray]:
    n, A = len(y), len(biases)
    p = softmax(X @ weights.T + biases)
    p[np.arange(n), y] -= 1.0
    grad_w = p.T @ X / n + 2.0 * l2 * weights
    grad_b = p.mean(axis=0)
    return grad_w, grad_b


def fit_multinomial(X: np.ndarray, y: np.ndarray, n_actions: int, lr: float = 0.1,
                    epochs: int = 800, l2: float = 1e-4,
                    grad_tol: float = 1e-8) -> PreferenceModel:
    """Gradient-descent multinomial logistic fit; zero-init, full-batch.

    Accepts a zero-width X for intercept-only models. With a single action
    present the fit degenerates to a near-one-hot policy (with a warning).
    """
    if len(y) == 0:
        raise ValidationError("cannot fit a preference model on zero steps")
    distinct = np.unique(y)
    if len(distinct) == 1:
        warnings.warn(
            f"preference fit saw a single action ({int(distinct[0])}); "
            "emitting a degenerate near-one-hot policy")
        biases = np.zeros(n_actions)
        biases[int(distinct[0])] = 30.0
        return PreferenceModel(np.zeros((n_actions, X.shape[1])), biases,
                               converged=True, epochs_run=0, final_grad_norm=0.0)
    weights = np.zeros((n_actions, X.shape[1]))
    biases = np.zeros(n_actions)
    grad_norm = np.inf
    epoch = 0
    for epoch in range(1, epochs + 1):
        gw, gb = multinomial_nll_grad(weights, biases, X, y, l2)
        weights = weights - lr * gw
        biases = biases - lr * gb
        grad_norm = float(np.sqrt((gw ** 2).sum() + (gb ** 2).sum()))
        if grad_norm < grad_tol:
            break
    return PreferenceModel(weights, biases, converged=grad_norm < grad_tol,
                           epochs_run=epoch, final_grad_norm=grad_norm)


def safe_subset(train: Transitions, fm: FeatureMap, risk: RiskModel,
                tau: float) -> np.ndarray:
    """Indices of training steps whose logged action is conformally safe.

    Keeps steps with p_harm(s, a_logged) < tau (strict); the NO_GATE
    sentinel keeps everything. An empty result is an error: the caller
    should retrain with a larger alpha.
    """
    scores = p_harm_matrix(risk, feature_matrix(fm, train))
    taken = scores[np.arange(len(train)), train.actions]
    keep = np.flatnonzero(taken < tau)
    if keep.size == 0:
        raise ValidationError(
            f"no training step scores below tau={tau:.6g}; "
            "increase alpha to loosen the global gate")
    return keep


def subset_transitions(tr: Transitions, keep: np.ndarray) -> Transitions:
    """Row-subset of a transition table (episode links are dropped)."""
    keep = np.asarray(keep)
    return Transitions(
        docs=tuple(tr.docs[i] for i in keep),
        member_ids=tuple(tr.member_ids[i] for i in keep),
        t=tr.t[keep],
        actions=tr.actions[keep],
        rewards=tr.rewards[keep],
        prev_rewards=tr.prev_rewards[keep],
        next_idx=np.full(len(keep), -1, dtype=np.int64),
        episode_id=tr.episode_id[keep],
        start_idx=np.zeros(0, dtype=np.int64),
    )


def fit_preference(safe: Transitions, fm: FeatureMap, n_actions: int,
                   lr: float = 0.1, epochs: int = 800,
                   l2: float = 1e-4) -> PreferenceModel:
    """Fit the base policy on the safe subset of the training split."""
    X = feature_matrix(fm, safe)
    return fit_multinomial(X, safe.actions, n_actions, lr=lr, epochs=epochs, l2=l2)


def blend(base_probs: np.ndarray, action_freq: np.ndarray, eta: float) -> np.ndarray:
    """Convex combination (1-eta)*base + eta*freq of two action distributions.

    Renormalizes only if floating drift pushes the sum away from 1 by more
    than 1e-12.
    """
    base_probs = np.asarray(base_probs, dtype=np.float64)
    action_freq = np.asarray(action_freq, dtype=np.float64)
    if base_probs.shape != action_freq.shape:
        raise ValueError(
            f"blend inputs disagree in shape: {base_probs.shape} vs {action_freq.shape}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    out = (1.0 - eta) * base_probs + eta * action_freq
    sums = out.sum(axis=-1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > 1e-12):
        out = out / sums
    return out
