"""ttlitd: offline decision-policy toolkit for cost-aware outreach.

Learns harm-gated, cost-aware action recommendations from logged episodes.
Safety comes from split-conformal thresholds with test-time local (kNN)
calibration; selection comes from inference-time deliberation over a
bootstrap Q-ensemble with tunable governance dials. A full off-policy
evaluation harness (FQE, doubly robust, resampling statistics) and an HTTP
recommendation service round out the package.
"""

__version__ = "0.1.0"

from .conformal import NO_GATE, global_tau, knn, local_thresholds
from .data import (Episode, FeatureMap, SplitAssignment, Step, SyntheticConfig,
                   build_feature_map, featurize, generate_synthetic, ingest,
                   split)
from .deliberation import CostTable, DialConfig, Recommendation, load_costs
from .harness import (FrontierRow, HarnessConfig, RunManifest, emit_reports,
                      evaluate_policies, frontier, load_config, sweep,
                      train_pipeline)
from .artifact import PolicyArtifact
from .baselines import PolicySpec, make_policy
from .ope import ValueEstimate, dr_estimate, fqe, paired_bootstrap, randomization_test
from .preference import PreferenceModel, blend, fit_preference, safe_subset
from .qensemble import QEnsemble, fit_ensemble, q_stats
from .risk import RiskModel, fit_risk, p_harm

__all__ = [
    "__version__",
    "NO_GATE", "global_tau", "knn", "local_thresholds",
    "Episode", "FeatureMap", "SplitAssignment", "Step", "SyntheticConfig",
    "build_feature_map", "featurize", "generate_synthetic", "ingest", "split",
    "CostTable", "DialConfig", "Recommendation", "load_costs",
    "FrontierRow", "HarnessConfig", "RunManifest", "emit_reports",
    "evaluate_policies", "frontier", "load_config", "sweep", "train_pipeline",
    "PolicyArtifact", "PolicySpec", "make_policy",
    "ValueEstimate", "dr_estimate", "fqe", "paired_bootstrap", "randomization_test",
    "PreferenceModel", "blend", "fit_preference", "safe_subset",
    "QEnsemble", "fit_ensemble", "q_stats",
    "RiskModel", "fit_risk", "p_harm",
]
