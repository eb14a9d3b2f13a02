"""End-to-end pipeline orchestration and report emission.

The harness turns a declarative config into: a trained policy artifact plus
run manifest, a policy-comparison table, a dial-sensitivity sweep, and the
efficiency frontier, all written as stable CSV/JSON reports. Every run is
deterministic under its seed.
"""

from __future__ import annotations

import csv
import datetime
import itertools
import json
import platform
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .artifact import PolicyArtifact, hash_config, hash_episodes
from .baselines import (POLICY_NAMES, PolicySpec, blended_policy_from, fit_bc,
                        make_policy)
from .conformal import NO_GATE, build_calibration_index, global_tau
from .data import (Episode, SyntheticConfig, ValidationError, apply_split,
                   build_feature_map, feature_matrix, flatten,
                   generate_synthetic, ingest, split, validate_actions)
from .deliberation import CostTable, DialConfig, make_cost_table
from .ope import (_bootstrap_ci, dr_estimate, fqe_model, paired_bootstrap,
                  randomization_test)
from .preference import fit_preference, safe_subset, subset_transitions
from .qensemble import fit_ensemble
from .risk import fit_risk

DEFAULT_COST_ENTRIES = [
    {"id": 0, "label": "text_checkin", "time_minutes": 4, "wage_per_minute": 0.55, "travel_minutes": 0},
    {"id": 1, "label": "app_message", "time_minutes": 5, "wage_per_minute": 0.55, "travel_minutes": 0},
    {"id": 2, "label": "phone_call", "time_minutes": 12, "wage_per_minute": 0.60, "travel_minutes": 0},
    {"id": 3, "label": "video_visit", "time_minutes": 20, "wage_per_minute": 0.70, "travel_minutes": 0},
    {"id": 4, "label": "nurse_line_call", "time_minutes": 15, "wage_per_minute": 0.95, "travel_minutes": 0},
    {"id": 5, "label": "home_visit", "time_minutes": 45, "wage_per_minute": 0.80, "travel_minutes": 25},
    {"id": 6, "label": "chw_home_visit", "time_minutes": 60, "wage_per_minute": 0.65, "travel_minutes": 30},
    {"id": 7, "label": "care_team_escalation", "time_minutes": 25, "wage_per_minute": 1.10, "travel_minutes": 0},
    {"id": 8, "label": "clinic_visit_scheduling", "time_minutes": 18, "wage_per_minute": 0.75, "travel_minutes": 5},
]


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | csv | jsonl
    path: str | None = None
    n_actions: int = 9
    n_members: int = 500
    mean_len: float = 6.0
    harm_base_rates: tuple[float, ...] | None = None
    temporal_split: bool = True
    max_keys: int = 64
    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)


@dataclass(frozen=True)
class ModelConfig:
    risk_lr: float = 0.2
    risk_epochs: int = 400
    risk_l2: float = 1e-4
    pref_lr: float = 0.1
    pref_epochs: int = 600
    pref_l2: float = 1e-4
    ensemble_members: int = 10
    ensemble_iterations: int = 10
    ensemble_ridge: float = 1e-4
    gamma: float = 0.99
    fqe_iterations: int = 15
    fqe_ridge: float = 1e-4
    n_boot: int = 2000
    n_perm: int = 5000


@dataclass(frozen=True)
class SweepConfig:
    k_values: tuple[int, ...] = (100, 200, 300)
    beta_values: tuple[float, ...] = (0.3, 0.6, 0.9)
    lambda_values: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0, 1.5)
    fqe_iterations: int = 6


@dataclass(frozen=True)
class HarnessConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    dials: DialConfig = field(default_factory=DialConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    frontier_lambda_costs: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0, 2.0)
    cost_entries: tuple = tuple(tuple(sorted(e.items())) for e in DEFAULT_COST_ENTRIES)

    def cost_table(self) -> CostTable:
        return make_cost_table([dict(e) for e in self.cost_entries])

    def as_dict(self) -> dict:
        return asdict(self)


_DIAL_KEY_MAP = {
    "alpha": "alpha",
    "K": "k_neighbors",
    "k": "k_neighbors",
    "eta": "eta",
    "beta": "beta",
    "lambda": "risk_penalty",
    "lambda_cost": "cost_penalty",
    "T": "temperature",
    "temperature": "temperature",
    "gating": "gating",
    "selection": "selection",
}


def dials_from_dict(doc: dict, base: DialConfig | None = None) -> DialConfig:
    """Map config-file dial names (alpha, K, eta, beta, lambda, lambda_cost,
    T, gating, selection) onto a DialConfig."""
    base = base or DialConfig()
    changes = {}
    for key, value in doc.items():
        if key not in _DIAL_KEY_MAP:
            raise ValueError(f"unknown dial {key!r}")
        changes[_DIAL_KEY_MAP[key]] = value
    return base.override(**changes)


def config_from_dict(doc: dict) -> HarnessConfig:
    doc = dict(doc or {})
    data_doc = dict(doc.get("data", {}))
    if "ratios" in data_doc:
        data_doc["ratios"] = tuple(data_doc["ratios"])
    if data_doc.get("harm_base_rates") is not None:
        data_doc["harm_base_rates"] = tuple(data_doc["harm_base_rates"])
    model_doc = dict(doc.get("model", {}))
    sweep_doc = dict(doc.get("sweep", {}))
    sweep_kwargs = {}
    for src, dst in (("K", "k_values"), ("beta", "beta_values"),
                     ("lambda", "lambda_values")):
        if src in sweep_doc:
            sweep_kwargs[dst] = tuple(sweep_doc[src])
    if "fqe_iterations" in sweep_doc:
        sweep_kwargs["fqe_iterations"] = int(sweep_doc["fqe_iterations"])
    costs_doc = doc.get("costs", {})
    if isinstance(costs_doc, dict) and "path" in costs_doc:
        with open(costs_doc["path"], encoding="utf-8") as fh:
            costs_doc = yaml.safe_load(fh)
    entries = costs_doc.get("actions") if isinstance(costs_doc, dict) else None
    entries = entries or DEFAULT_COST_ENTRIES
    frontier_doc = doc.get("frontier", {})
    lambda_costs = tuple(frontier_doc.get("lambda_costs", (0.0, 0.25, 0.5, 1.0, 2.0)))
    return HarnessConfig(
        seed=int(doc.get("seed", 0)),
        data=DataConfig(**data_doc),
        model=ModelConfig(**model_doc),
        dials=dials_from_dict(doc.get("dials", {})),
        sweep=SweepConfig(**sweep_kwargs),
        frontier_lambda_costs=lambda_costs,
        cost_entries=tuple(tuple(sorted(e.items())) for e in entries),
    )


def load_config(path: str | Path) -> HarnessConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def load_episodes(config: HarnessConfig) -> list[Episode]:
    """Materialize the configured data source (synthetic is seeded)."""
    d = config.data
    if d.source == "synthetic":
        rates = d.harm_base_rates
        syn = SyntheticConfig(
            n_members=d.n_members, mean_len=d.mean_len, n_actions=d.n_actions,
            harm_base_rates=rates if rates is not None
            else SyntheticConfig.__dataclass_fields__["harm_base_rates"].default,
            seed=config.seed)
        return generate_synthetic(syn).episodes
    if d.source in ("csv", "jsonl"):
        if not d.path:
            raise ValueError("data.path is required for csv/jsonl sources")
        return ingest(d.path, d.source, d.n_actions)
    raise ValueError(f"unknown data source {d.source!r}")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class RunManifest:
    """Reproducibility record emitted by every pipeline run."""

    created_at: str
    package_version: str
    python_version: str
    numpy_version: str
    seed: int
    config: dict
    data_hash: str
    artifact_hash: str
    split_sizes: tuple[int, int, int]
    tau_global: float | str
    safe_subset_size: int
    fit_info: dict
    notes: dict
    warnings: list[str]

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_pipeline(episodes: Sequence[Episode],
                   config: HarnessConfig) -> tuple[PolicyArtifact, RunManifest]:
    """Run split -> features -> risk -> global tau -> safe subset ->
    preference -> calibration index -> BC -> Q-ensemble, and freeze the
    artifact. Deterministic under config.seed."""
    A = config.data.n_actions
    m = config.model
    validate_actions(episodes, A)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        mode = "temporal" if config.data.temporal_split else "index"
        assignment = split(episodes, mode=mode, ratios=config.data.ratios)
        train_eps, cal_eps, test_eps = apply_split(episodes, assignment)
        if not train_eps or not cal_eps:
            raise ValidationError("split produced an empty train or calibration slice")
        tr_train = flatten(train_eps)
        tr_cal = flatten(cal_eps)

        fm = build_feature_map(train_eps, max_keys=config.data.max_keys,
                               seed=config.seed)
        risk = fit_risk(tr_train, fm, A, lr=m.risk_lr, epochs=m.risk_epochs,
                        l2=m.risk_l2)
        calibration = build_calibration_index(tr_cal, fm, risk)
        tau = global_tau(calibration.taken_scores, config.dials.alpha)
        keep = safe_subset(tr_train, fm, risk, tau)
        preference = fit_preference(subset_transitions(tr_train, keep), fm, A,
                                    lr=m.pref_lr, epochs=m.pref_epochs, l2=m.pref_l2)
        bc = fit_bc(tr_train, fm, A, lr=m.pref_lr, epochs=m.pref_epochs, l2=m.pref_l2)
        eval_policy = blended_policy_from(preference, calibration,
                                          min(config.dials.k_neighbors, len(calibration)),
                                          config.dials.eta)
        ensemble = fit_ensemble(tr_train, fm, eval_policy, A,
                                members=m.ensemble_members, gamma=m.gamma,
                                iterations=m.ensemble_iterations,
                                ridge=m.ensemble_ridge, seed=config.seed)
    config_dict = config.as_dict()
    artifact = PolicyArtifact(
        feature_map=fm,
        risk=risk,
        tau_global=tau,
        calibration=calibration,
        preference=preference,
        behavior_cloning=bc,
        ensemble=ensemble,
        costs=config.cost_table(),
        n_actions=A,
        dials=config.dials,
        seed=config.seed,
        data_hash=hash_episodes(episodes),
        config_hash=hash_config(config_dict),
    )
    manifest = RunManifest(
        created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        package_version=__version__,
        python_version=platform.python_version(),
        numpy_version=np.__version__,
        seed=config.seed,
        config=config_dict,
        data_hash=artifact.data_hash,
        artifact_hash=artifact.content_hash(),
        split_sizes=assignment.sizes,
        tau_global="no_gate" if tau == NO_GATE else float(tau),
        safe_subset_size=int(len(keep)),
        fit_info={
            "risk": {"converged": risk.converged, "epochs_run": risk.epochs_run,
                     "final_grad_norm": risk.final_grad_norm,
                     "class_weights": list(risk.class_weights)},
            "preference": {"converged": preference.converged,
                           "epochs_run": preference.epochs_run},
            "bc": {"converged": bc.converged, "epochs_run": bc.epochs_run},
        },
        notes={
            "ensemble_resampling": "episode bootstrap with replacement",
            "ensemble_eval_policy": "TTL-blended preference policy (unmasked)",
            "q_value_cap": "predictions clipped at 0 (rewards are non-positive)",
            "dr_variant": "step-wise recursive doubly robust",
            "cost_normalization": "raw cost / min positive raw cost",
        },
        warnings=[str(w.message) for w in caught],
    )
    return artifact, manifest


def test_split_episodes(episodes: Sequence[Episode],
                        config: HarnessConfig) -> list[Episode]:
    """The evaluation slice of the configured split."""
    mode = "temporal" if config.data.temporal_split else "index"
    assignment = split(episodes, mode=mode, ratios=config.data.ratios)
    return apply_split(episodes, assignment)[2]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyRow:
    name: str
    label: str
    v0: float
    ci_low: float
    ci_high: float
    v0_dr: float
    expected_cost: float
    delta_vs_ttl_itd: float
    delta_ci_low: float
    delta_ci_high: float
    p_value: float


def expected_start_cost(policy, start_X: np.ndarray, costs: CostTable) -> float:
    """Mean per-decision normalized cost of the policy at episode starts."""
    probs = policy(start_X)
    return float((probs @ costs.normalized).mean())


def evaluate_policies(artifact: PolicyArtifact, episodes: Sequence[Episode],
                      specs: Sequence[PolicySpec] | None = None,
                      dials: DialConfig | None = None,
                      config: HarnessConfig | None = None) -> list[PolicyRow]:
    """FQE + DR comparison of the named policies on held-out episodes.

    Rows are sorted ascending by the FQE estimate; deltas, their paired
    bootstrap CIs, and randomization p-values are taken against ttl_itd.
    """
    if not episodes:
        raise ValueError("evaluation needs at least one episode")
    config = config or HarnessConfig()
    m = config.model
    specs = list(specs) if specs is not None else [PolicySpec(n) for n in POLICY_NAMES]
    dials = dials or artifact.dials
    tr = flatten(episodes)
    start_X = feature_matrix(artifact.feature_map, tr)[tr.start_idx]
    bc_policy = make_policy(PolicySpec("bc"), artifact, dials)

    results = []
    episode_values = {}
    for i, spec in enumerate(specs):
        policy = make_policy(spec, artifact, dials)
        q, ep_values = fqe_model(episodes, artifact.feature_map, policy,
                                 artifact.n_actions, gamma=m.gamma,
                                 iterations=m.fqe_iterations, ridge=m.fqe_ridge)
        seed = config.seed * 7919 + i
        dr = dr_estimate(episodes, artifact.feature_map, policy, bc_policy,
                         q.values, gamma=m.gamma, n_boot=m.n_boot, seed=seed)
        results.append((i, spec, ep_values, dr, policy))
        episode_values[spec.name] = ep_values

    ttl_values = episode_values.get("ttl_itd")
    rows = []
    for i, spec, ep_values, dr, policy in results:
        seed = config.seed * 7919 + i
        lo, hi = _bootstrap_ci(ep_values, m.n_boot, seed)
        if ttl_values is not None:
            pb = paired_bootstrap(ep_values, ttl_values, n_boot=m.n_boot, seed=seed)
            p_val = randomization_test(ep_values, ttl_values, n_perm=m.n_perm,
                                       seed=seed)
            delta, dlo, dhi = pb["delta_mean"], pb["ci_low"], pb["ci_high"]
        else:
            delta = dlo = dhi = p_val = float("nan")
        rows.append(PolicyRow(
            name=spec.name,
            label=spec.label,
            v0=float(ep_values.mean()),
            ci_low=lo,
            ci_high=hi,
            v0_dr=dr.v0,
            expected_cost=expected_start_cost(policy, start_X, artifact.costs),
            delta_vs_ttl_itd=delta,
            delta_ci_low=dlo,
            delta_ci_high=dhi,
            p_value=p_val,
        ))
    rows.sort(key=lambda r: r.v0)
    return rows


# ---------------------------------------------------------------------------
# Sweep and frontier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepCell:
    k_neighbors: int
    beta: float
    risk_penalty: float
    v0_ttl_itd: float
    v0_bc: float
    v0_global_tau: float


def sweep(artifact: PolicyArtifact, episodes: Sequence[Episode],
          grid: SweepConfig | None = None, dials: DialConfig | None = None,
          config: HarnessConfig | None = None) -> list[SweepCell]:
    """Lightweight-FQE sensitivity sweep over (K, beta, lambda).

    BC and global-tau comparison columns are dial-independent and computed
    once. Cells are returned sorted by the TTL+ITD estimate, descending
    (stable in grid order on ties).
    """
    config = config or HarnessConfig()
    grid = grid or config.sweep
    if not (grid.k_values and grid.beta_values and grid.lambda_values):
        raise ValueError("sweep grid must have at least one value per dial")
    dials = dials or artifact.dials
    m = config.model
    fm = artifact.feature_map

    def light_fqe(policy) -> float:
        _, ep_values = fqe_model(episodes, fm, policy, artifact.n_actions,
                                 gamma=m.gamma, iterations=grid.fqe_iterations,
                                 ridge=m.fqe_ridge)
        return float(ep_values.mean())

    v0_bc = light_fqe(make_policy(PolicySpec("bc"), artifact, dials))
    v0_gt = light_fqe(make_policy(PolicySpec("global_tau"), artifact, dials))
    cells = []
    for k, beta, lam in itertools.product(grid.k_values, grid.beta_values,
                                          grid.lambda_values):
        cell_dials = dials.override(k_neighbors=int(k), beta=float(beta),
                                    risk_penalty=float(lam))
        v0 = light_fqe(make_policy(PolicySpec("ttl_itd"), artifact, cell_dials))
        cells.append(SweepCell(int(k), float(beta), float(lam), v0, v0_bc, v0_gt))
    cells.sort(key=lambda c: -c.v0_ttl_itd)
    return cells


@dataclass(frozen=True)
class FrontierRow:
    lambda_cost: float
    expected_cost: float
    v0: float


def frontier(artifact: PolicyArtifact, episodes: Sequence[Episode],
             lambda_costs: Sequence[float] | None = None,
             dials: DialConfig | None = None,
             config: HarnessConfig | None = None) -> list[FrontierRow]:
    """Trace the efficiency frontier: vary the cost penalty, record the
    expected chosen-action cost at episode starts and the FQE estimate."""
    config = config or HarnessConfig()
    if lambda_costs is None:
        lambda_costs = config.frontier_lambda_costs
    if len(lambda_costs) == 0:
        raise ValueError("frontier needs at least one lambda_cost")
    dials = dials or artifact.dials
    m = config.model
    tr = flatten(episodes)
    start_X = feature_matrix(artifact.feature_map, tr)[tr.start_idx]
    rows = []
    for lc in sorted(float(v) for v in lambda_costs):
        run_dials = dials.override(cost_penalty=lc)
        policy = make_policy(PolicySpec("ttl_itd"), artifact, run_dials)
        _, ep_values = fqe_model(episodes, artifact.feature_map, policy,
                                 artifact.n_actions, gamma=m.gamma,
                                 iterations=m.fqe_iterations, ridge=m.fqe_ridge)
        rows.append(FrontierRow(
            lambda_cost=lc,
            expected_cost=expected_start_cost(policy, start_X, artifact.costs),
            v0=float(ep_values.mean()),
        ))
    return rows


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_reports(out_dir: str | Path,
                 comparison: Sequence[PolicyRow] | None = None,
                 sweep_cells: Sequence[SweepCell] | None = None,
                 frontier_rows: Sequence[FrontierRow] | None = None,
                 manifest: RunManifest | None = None) -> list[Path]:
    """Write CSV tables, plot-data files, and the manifest into out_dir.

    Re-running with identical inputs produces byte-identical CSVs; only the
    manifest's created_at timestamp varies.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plots = out / "plots"
    written = []
    if comparison is not None:
        path = out / "policy_comparison.csv"
        _write_csv(path,
                   ["policy", "label", "v0", "ci_low", "ci_high", "v0_dr",
                    "expected_cost", "delta_vs_ttl_itd", "delta_ci_low",
                    "delta_ci_high", "p_value"],
                   [[r.name, r.label, r.v0, r.ci_low, r.ci_high, r.v0_dr,
                     r.expected_cost, r.delta_vs_ttl_itd, r.delta_ci_low,
                     r.delta_ci_high, r.p_value] for r in comparison])
        written.append(path)
    if sweep_cells is not None:
        path = out / "sweep.csv"
        _write_csv(path,
                   ["K", "beta", "lambda", "v0_ttl_itd", "v0_bc", "v0_global_tau"],
                   [[c.k_neighbors, c.beta, c.risk_penalty, c.v0_ttl_itd,
                     c.v0_bc, c.v0_global_tau] for c in sweep_cells])
        written.append(path)
        plots.mkdir(exist_ok=True)
        hm = plots / "sweep_heatmap.csv"
        _write_csv(hm, ["K", "beta", "lambda", "v0"],
                   [[c.k_neighbors, c.beta, c.risk_penalty, c.v0_ttl_itd]
                    for c in sweep_cells])
        written.append(hm)
    if frontier_rows is not None:
        path = out / "frontier.csv"
        _write_csv(path, ["lambda_cost", "expected_cost", "v0"],
                   [[r.lambda_cost, r.expected_cost, r.v0] for r in frontier_rows])
        written.append(path)
        plots.mkdir(exist_ok=True)
        fp = plots / "frontier_points.csv"
        _write_csv(fp, ["expected_cost", "v0", "lambda_cost"],
                   [[r.expected_cost, r.v0, r.lambda_cost]
                    for r in sorted(frontier_rows, key=lambda r: r.lambda_cost)])
        written.append(fp)
    if manifest is not None:
        path = out / "manifest.json"
        manifest.save(path)
        written.append(path)
    return written
