"""The frozen train-time policy bundle.

Everything inference needs lives here: feature map, risk model, global
conformal threshold, calibration index, preference and behavior-cloning
models, Q-ensemble, and the cost table. Governance dials are *not* part of
the artifact; they act purely at inference time.
"""

from __future__ import annotations

import hashlib
import json
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .conformal import CalibrationIndex, local_thresholds
from .data import Episode, FeatureMap, Step, featurize
from .deliberation import CostTable, DialConfig, Recommendation, recommend_from_parts
from .preference import PreferenceModel
from .qensemble import QEnsemble, q_stats_matrix
from .risk import RiskModel, p_harm_matrix


def hash_episodes(episodes: Sequence[Episode]) -> str:
    """Stable content hash of a dataset (order-sensitive)."""
    h = hashlib.sha256()
    for ep in episodes:
        for s in ep.steps:
            h.update(
                f"{s.member_id}|{s.t}|{s.action}|{s.reward!r}|"
                f"{json.dumps(s.state_doc, sort_keys=True)}\n".encode())
    return h.hexdigest()


def hash_config(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def _hash_part(h, obj) -> None:
    if isinstance(obj, np.ndarray):
        h.update(str(obj.shape).encode())
        h.update(np.ascontiguousarray(obj).tobytes())
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _hash_part(h, item)
    elif isinstance(obj, dict):
        for k in sorted(obj):
            h.update(str(k).encode())
            _hash_part(h, obj[k])
    else:
        h.update(repr(obj).encode())


@dataclass(frozen=True)
class PolicyArtifact:
    """Immutable training output; safe to share across concurrent readers."""

    feature_map: FeatureMap
    risk: RiskModel
    tau_global: float
    calibration: CalibrationIndex
    preference: PreferenceModel
    behavior_cloning: PreferenceModel
    ensemble: QEnsemble
    costs: CostTable
    n_actions: int
    dials: DialConfig
    seed: int
    data_hash: str
    config_hash: str

    def content_hash(self) -> str:
        """Deterministic hash over every learned parameter and setting."""
        h = hashlib.sha256()
        fm = self.feature_map
        _hash_part(h, list(fm.selected_keys))
        _hash_part(h, fm.means)
        _hash_part(h, fm.stds)
        _hash_part(h, fm.key_medians)
        _hash_part(h, fm.category_freqs)
        _hash_part(h, self.risk.weights)
        _hash_part(h, self.risk.bias)
        _hash_part(h, self.risk.class_weights)
        _hash_part(h, self.tau_global)
        _hash_part(h, self.calibration.points)
        _hash_part(h, self.calibration.taken_actions)
        _hash_part(h, self.calibration.per_action_scores)
        _hash_part(h, self.preference.weights)
        _hash_part(h, self.preference.biases)
        _hash_part(h, self.behavior_cloning.weights)
        _hash_part(h, self.behavior_cloning.biases)
        for m in self.ensemble.members:
            _hash_part(h, m.state_weights)
            _hash_part(h, m.action_offsets)
            _hash_part(h, m.intercept)
        _hash_part(h, self.costs.raw)
        _hash_part(h, self.costs.normalized)
        _hash_part(h, self.n_actions)
        _hash_part(h, self.seed)
        _hash_part(h, self.data_hash)
        _hash_part(h, self.config_hash)
        return h.hexdigest()

    def recommend(self, state_doc: dict, t: int, prev_reward: float,
                  dials: DialConfig | None = None,
                  seed: int | None = None) -> Recommendation:
        """Run the deployment pipeline for one state.

        Parse/featurize the state, query the local calibrator, score every
        action under the deliberation dials, mask unsafe actions, select.
        """
        dials = dials or self.dials
        step = Step("_query", max(int(t), 0), state_doc, 0, 0.0)
        x = featurize(self.feature_map, step, prev_reward)
        local = local_thresholds(self.calibration, x, dials.k_neighbors, dials.alpha)
        q_mean, q_std = q_stats_matrix(self.ensemble, x[None, :])
        harm = p_harm_matrix(self.risk, x[None, :])[0]
        return recommend_from_parts(q_mean[0], q_std[0], harm, local,
                                    self.costs, dials, seed=seed)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)

    @staticmethod
    def load(path: str | Path) -> "PolicyArtifact":
        with open(path, "rb") as fh:
            artifact = pickle.load(fh)
        if not isinstance(artifact, PolicyArtifact):
            raise ValueError(f"{path} does not contain a policy artifact")
        return artifact
