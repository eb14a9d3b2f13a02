"""Action-conditional harm model.

A single class-weighted logistic regression over the state features
concatenated with an action one-hot estimates the probability that the
logged follow-up window shows adverse utilization (reward < 0).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .data import FeatureMap, Transitions, ValidationError, feature_matrix


@dataclass(frozen=True)
class RiskModel:
    """Trained harm model: p_harm(s, a) = sigmoid(w . [x; onehot(a)] + b)."""

    weights: np.ndarray  # (width + n_actions,)
    bias: float
    n_actions: int
    class_weights: tuple[float, float]  # (w_neg, w_pos), mean 1
    converged: bool = True
    epochs_run: int = 0
    final_grad_norm: float = 0.0


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def design_matrix(X: np.ndarray, actions: np.ndarray, n_actions: int) -> np.ndarray:
    """Concatenate feature rows with action one-hots."""
    onehot = np.zeros((len(actions), n_actions))
    onehot[np.arange(len(actions)), actions] = 1.0
    return np.hstack([X, onehot])


def weighted_nll_loss(params: np.ndarray, Z: np.ndarray, y: np.ndarray,
                      sample_w: np.ndarray, l2: float) -> float:
    """Weighted-mean negative log-likelihood plus an L2 penalty on weights.

    The data term is normalized by the total sample weight, so rescaling all
    weights by a constant leaves the objective (and its argmin) unchanged.
    The bias (last parameter) is not penalized.
    """
    w, b = params[:-1], params[-1]
    z = Z @ w + b
    # log(1 + exp(-z*sgn)) computed stably
    margins = np.where(y == 1, z, -z)
    nll = np.logaddexp(0.0, -margins)
    return float((sample_w * nll).sum() / sample_w.sum() + l2 * (w @ w))


def weighted_nll_grad(params: np.ndarray, Z: np.ndarray, y: np.ndarray,
                      sample_w: np.ndarray, l2: float) -> np.ndarray:
    w, b = params[:-1], params[-1]
    p = _sigmoid(Z @ w + b)
    resid = sample_w * (p - y) / sample_w.sum()
    grad_w = Z.T @ resid + 2.0 * l2 * w
    grad_b = resid.sum()
    return np.concatenate([grad_w, [grad_b]])


def inverse_frequency_weights(y: np.ndarray) -> tuple[float, float]:
    """Per-class weights proportional to 1/frequency, normalized to mean 1."""
    n = len(y)
    n_pos = int(y.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        return (1.0, 1.0)
    inv = np.array([n / n_neg, n / n_pos])
    inv = inv / inv.mean()
    return (float(inv[0]), float(inv[1]))


def fit_risk(train: Transitions, fm: FeatureMap, n_actions: int, lr: float = 0.2,
             epochs: int = 500, l2: float = 1e-4, seed: int | None = None,
             grad_tol: float = 1e-7) -> RiskModel:
    """Fit the harm model on the training split by full-batch gradient descent.

    Labels are y = 1 iff reward < 0. Class weights are inverse label
    frequency normalized to mean 1. If only one class is present the model
    degenerates to the constant class rate (with a warning).
    """
    del seed  # deterministic: zero init, full-batch updates
    if len(train) == 0:
        raise ValidationError("risk model needs a non-empty training split")
    X = feature_matrix(fm, train)
    y = (train.rewards < 0).astype(np.float64)
    Z = design_matrix(X, train.actions, n_actions)

    if y.min() == y.max():
        rate = float(np.clip(y.mean(), 1e-6, 1.0 - 1e-6))
        warnings.warn(
            "risk labels are single-class; returning the constant class rate "
            f"({y.mean():.3f}) with no learnable threshold")
        bias = float(np.log(rate / (1.0 - rate)))
        return RiskModel(np.zeros(Z.shape[1]), bias, n_actions, (1.0, 1.0),
                         converged=True, epochs_run=0, final_grad_norm=0.0)

    cw = inverse_frequency_weights(y)
    sample_w = np.where(y == 1, cw[1], cw[0])
    params = np.zeros(Z.shape[1] + 1)
    grad_norm = np.inf
    epoch = 0
    for epoch in range(1, epochs + 1):
        grad = weighted_nll_grad(params, Z, y, sample_w, l2)
        params = params - lr * grad
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < grad_tol:
            break
    return RiskModel(
        weights=params[:-1],
        bias=float(params[-1]),
        n_actions=n_actions,
        class_weights=cw,
        converged=grad_norm < grad_tol,
        epochs_run=epoch,
        final_grad_norm=grad_norm,
    )


def p_harm(model: RiskModel, x: np.ndarray, action: int) -> float:
    """Harm probability for one (state, action); strictly inside (0, 1)."""
    if action >= model.n_actions or action < 0:
        raise ValueError(f"action {action} out of range [0, {model.n_actions})")
    width = len(model.weights) - model.n_actions
    z = float(model.weights[:width] @ x + model.weights[width + action] + model.bias)
    return float(_sigmoid(np.array([z]))[0])


def p_harm_matrix(model: RiskModel, X: np.ndarray) -> np.ndarray:
    """Harm probabilities for every action at every row of X; shape (n, A)."""
    width = X.shape[1]
    base = X @ model.weights[:width] + model.bias
    z = base[:, None] + model.weights[width:][None, :]
    return _sigmoid(z)
