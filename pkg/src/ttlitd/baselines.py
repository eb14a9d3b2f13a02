"""Reference policies for off-policy comparison.

Every policy is exposed as a vectorized probability function over
featurized states, so the same evaluator runs the full deliberation stack
and its ablations side by side:

- ``ttl_itd``: the full pipeline (local gate + deliberation scoring)
- ``global_tau``: preference model masked by the global threshold
- ``bc``: behavior cloning, unmasked
- ``itd_only``: deliberation scoring with the global threshold as gate
- ``ttl_only``: blended preference policy with the local gate, no Q or cost
- ``min_cost``: always the cheapest action
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .artifact import PolicyArtifact
from .conformal import local_thresholds_batch
from .data import FeatureMap, Transitions
from .deliberation import DialConfig, deliberation_scores
from .preference import PreferenceModel, blend, fit_multinomial, predict_probs
from .qensemble import q_stats_matrix
from .risk import p_harm_matrix

POLICY_NAMES = ("ttl_itd", "global_tau", "bc", "itd_only", "ttl_only", "min_cost")

DISPLAY_LABELS = {
    "ttl_itd": "TTL+ITD",
    "global_tau": "Global-τ",
    "bc": "BC",
    "itd_only": "ITD only",
    "ttl_only": "TTL only",
    "min_cost": "MinCost",
}


@dataclass(frozen=True)
class PolicySpec:
    """A named baseline plus optional per-policy dial overrides."""

    name: str
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in POLICY_NAMES:
            raise ValueError(f"unknown policy {self.name!r}; expected one of {POLICY_NAMES}")

    @property
    def label(self) -> str:
        return DISPLAY_LABELS[self.name]


def fit_bc(train: Transitions, fm: FeatureMap, n_actions: int, lr: float = 0.1,
           epochs: int = 800, l2: float = 1e-4) -> PreferenceModel:
    """Behavior cloning: maximum-likelihood imitation on the unfiltered split."""
    from .data import feature_matrix

    return fit_multinomial(feature_matrix(fm, train), train.actions, n_actions,
                           lr=lr, epochs=epochs, l2=l2)


def _unmask_fallback(masked: np.ndarray, harm: np.ndarray) -> np.ndarray:
    """Rows with every action masked fall back to their minimal-harm action."""
    dead = masked.all(axis=1)
    if dead.any():
        best = np.argmin(harm[dead], axis=1)
        masked = masked.copy()
        masked[np.flatnonzero(dead), :] = True
        masked[np.flatnonzero(dead), best] = False
    return masked


def _selection_matrix(scores: np.ndarray, masked: np.ndarray,
                      dials: DialConfig) -> np.ndarray:
    """Greedy or softmax selection as a row-stochastic matrix."""
    gated = np.where(masked, -np.inf, scores)
    probs = np.zeros_like(scores)
    if dials.selection == "greedy":
        best = np.argmax(gated, axis=1)  # lowest index wins ties
        probs[np.arange(len(scores)), best] = 1.0
    else:
        z = gated / dials.temperature
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
    return probs


def _renormalize_masked(probs: np.ndarray, masked: np.ndarray) -> np.ndarray:
    out = np.where(masked, 0.0, probs)
    return out / out.sum(axis=1, keepdims=True)


def make_policy(spec: PolicySpec, artifact: PolicyArtifact,
                dials: DialConfig | None = None):
    """Build the named policy as a map from feature rows to action probs."""
    dials = (dials or artifact.dials).override(**spec.overrides)
    costs = artifact.costs

    if spec.name == "min_cost":
        cheapest = int(np.argmin(costs.normalized))

        def min_cost_policy(X: np.ndarray) -> np.ndarray:
            probs = np.zeros((len(X), artifact.n_actions))
            probs[:, cheapest] = 1.0
            return probs

        return min_cost_policy

    if spec.name == "bc":
        def bc_policy(X: np.ndarray) -> np.ndarray:
            return predict_probs(artifact.behavior_cloning, X)

        return bc_policy

    if spec.name == "global_tau":
        def global_tau_policy(X: np.ndarray) -> np.ndarray:
            probs = predict_probs(artifact.preference, X)
            harm = p_harm_matrix(artifact.risk, X)
            masked = harm >= artifact.tau_global
            masked = _unmask_fallback(masked, harm)
            return _renormalize_masked(probs, masked)

        return global_tau_policy

    if spec.name == "ttl_only":
        def ttl_only_policy(X: np.ndarray) -> np.ndarray:
            base = predict_probs(artifact.preference, X)
            tau, freq = local_thresholds_batch(
                artifact.calibration, X, dials.k_neighbors, dials.alpha)
            blended = blend(base, freq, dials.eta)
            harm = p_harm_matrix(artifact.risk, X)
            if dials.gating:
                masked = harm >= tau
                masked = _unmask_fallback(masked, harm)
            else:
                masked = np.zeros_like(harm, dtype=bool)
            return _renormalize_masked(blended, masked)

        return ttl_only_policy

    if spec.name == "itd_only":
        def itd_only_policy(X: np.ndarray) -> np.ndarray:
            q_mean, q_std = q_stats_matrix(artifact.ensemble, X)
            harm = p_harm_matrix(artifact.risk, X)
            scores = deliberation_scores(q_mean, q_std, harm,
                                         costs.normalized[None, :], dials)
            if dials.gating:
                masked = harm >= artifact.tau_global
                masked = _unmask_fallback(masked, harm)
            else:
                masked = np.zeros_like(harm, dtype=bool)
            return _selection_matrix(scores, masked, dials)

        return itd_only_policy

    # ttl_itd: the full pipeline
    def ttl_itd_policy(X: np.ndarray) -> np.ndarray:
        q_mean, q_std = q_stats_matrix(artifact.ensemble, X)
        harm = p_harm_matrix(artifact.risk, X)
        tau, _ = local_thresholds_batch(
            artifact.calibration, X, dials.k_neighbors, dials.alpha)
        scores = deliberation_scores(q_mean, q_std, harm,
                                     costs.normalized[None, :], dials)
        if dials.gating:
            masked = harm >= tau
            masked = _unmask_fallback(masked, harm)
        else:
            masked = np.zeros_like(harm, dtype=bool)
        return _selection_matrix(scores, masked, dials)

    return ttl_itd_policy


def blended_policy_from(preference: PreferenceModel, calibration, k_neighbors: int,
                        eta: float):
    """The unmasked TTL blend: (1-eta)*preference + eta*neighbor frequencies.

    Built from components so the trainer can use it before the artifact is
    assembled; this is the evaluation policy the Q-ensemble is trained under.
    """
    from .conformal import neighbor_action_freq

    def policy(X: np.ndarray) -> np.ndarray:
        base = predict_probs(preference, X)
        freq = neighbor_action_freq(calibration, X, k_neighbors)
        return blend(base, freq, eta)

    return policy


def blended_policy(artifact: PolicyArtifact, dials: DialConfig | None = None):
    dials = dials or artifact.dials
    return blended_policy_from(artifact.preference, artifact.calibration,
                               dials.k_neighbors, dials.eta)
