"""Inference-time deliberation: cost tables, governance dials, scoring.

Each action is scored as

    score(a) = Q_mean(s,a) - beta*Q_std(s,a) - lambda*p_harm(s,a)
               - lambda_cost*cost(a)

with actions masked when their predicted harm reaches the local threshold
tau_s(a). Selection is greedy or softmax-at-temperature over the unmasked
set. If every action is masked the single lowest-risk action is unmasked
and the recommendation is flagged as a fallback.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .conformal import NO_GATE, LocalThresholds
from .preference import softmax


@dataclass(frozen=True)
class CostTable:
    """Per-action effort costs: raw minutes-and-wage cost, then normalized
    so the cheapest positive-cost action costs exactly 1.0."""

    labels: tuple[str, ...]
    time_minutes: np.ndarray
    wage_per_minute: np.ndarray
    travel_minutes: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray

    @property
    def n_actions(self) -> int:
        return len(self.raw)


def make_cost_table(entries: list[dict]) -> CostTable:
    """Build a cost table from per-action config entries.

    Each entry needs ``id``, ``label``, ``time_minutes``, ``wage_per_minute``
    and ``travel_minutes``; ids must cover 0..A-1 exactly.
    """
    by_id: dict[int, dict] = {}
    for e in entries:
        for f in ("id", "label", "time_minutes", "wage_per_minute", "travel_minutes"):
            if f not in e:
                raise ValueError(f"cost entry {e.get('id', '?')}: missing field {f!r}")
        by_id[int(e["id"])] = e
    n = len(entries)
    if sorted(by_id) != list(range(n)):
        raise ValueError(
            f"cost table action ids must cover 0..{n - 1}, got {sorted(by_id)}")
    time_m = np.array([float(by_id[a]["time_minutes"]) for a in range(n)])
    wage = np.array([float(by_id[a]["wage_per_minute"]) for a in range(n)])
    travel = np.array([float(by_id[a]["travel_minutes"]) for a in range(n)])
    for name, arr in (("time_minutes", time_m), ("wage_per_minute", wage),
                      ("travel_minutes", travel)):
        if (arr < 0).any():
            raise ValueError(f"negative {name} in cost table")
    raw = time_m * wage + travel
    positive = raw[raw > 0]
    if positive.size == 0:
        raise ValueError("cost table has no positive raw cost to normalize against")
    return CostTable(
        labels=tuple(str(by_id[a]["label"]) for a in range(n)),
        time_minutes=time_m,
        wage_per_minute=wage,
        travel_minutes=travel,
        raw=raw,
        normalized=raw / positive.min(),
    )


def load_costs(path) -> CostTable:
    """Load the cost table from a YAML file with a top-level ``actions:`` list."""
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or "actions" not in doc:
        raise ValueError(f"{path}: cost config needs a top-level 'actions' list")
    return make_cost_table(doc["actions"])


@dataclass(frozen=True)
class DialConfig:
    """Inference-time governance dials; reshaping these never retrains."""

    alpha: float = 0.05  # miscoverage level for the conformal gates
    k_neighbors: int = 200  # TTL neighborhood size (K)
    eta: float = 0.3  # blend weight toward the neighborhood action prior
    beta: float = 0.5  # ensemble-uncertainty penalty
    risk_penalty: float = 1.0  # weight on predicted harm (lambda)
    cost_penalty: float = 0.0  # weight on normalized cost (lambda_cost)
    temperature: float = 1.0  # softmax temperature (T)
    gating: bool = True
    selection: str = "greedy"  # or "softmax"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.k_neighbors < 1:
            raise ValueError(f"K must be >= 1, got {self.k_neighbors}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        for name in ("beta", "risk_penalty", "cost_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.selection not in ("greedy", "softmax"):
            raise ValueError(f"selection must be 'greedy' or 'softmax', got {self.selection}")

    def override(self, **changes) -> "DialConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class ActionScore:
    """Audit row for one candidate action."""

    action: int
    q_mean: float
    q_std: float
    p_harm: float
    cost: float
    tau_local: float
    masked: bool
    score: float


@dataclass(frozen=True)
class Recommendation:
    """Chosen action plus the full per-action audit breakdown."""

    action: int
    selection: str
    fallback: bool
    breakdown: tuple[ActionScore, ...]
    action_freq: tuple[float, ...]
    seed: int | None = None


def deliberation_scores(q_mean: np.ndarray, q_std: np.ndarray, harm: np.ndarray,
                        cost: np.ndarray, dials: DialConfig) -> np.ndarray:
    """The deliberation score for each action (vectorized, any shape)."""
    return (q_mean - dials.beta * q_std - dials.risk_penalty * harm
            - dials.cost_penalty * cost)


def score_actions(q_mean: np.ndarray, q_std: np.ndarray, harm: np.ndarray,
                  local: LocalThresholds, costs: CostTable,
                  dials: DialConfig) -> tuple[np.ndarray, np.ndarray, bool]:
    """Score all actions and compute the safety mask for one state.

    Returns (scores, masked, fallback). With gating on, action a is masked
    when p_harm >= tau_s(a); a NO_GATE threshold never masks. If everything
    is masked, the single minimal-harm action is unmasked and the fallback
    flag is set.
    """
    scores = deliberation_scores(q_mean, q_std, harm, costs.normalized, dials)
    if dials.gating:
        masked = harm >= local.tau_local
    else:
        masked = np.zeros(len(scores), dtype=bool)
    fallback = False
    if masked.all():
        fallback = True
        masked = np.ones(len(scores), dtype=bool)
        masked[int(np.argmin(harm))] = False
    return scores, masked, fallback


def selection_probs(scores: np.ndarray, masked: np.ndarray,
                    dials: DialConfig) -> np.ndarray:
    """The selection rule as an explicit action distribution.

    Greedy puts mass 1 on the lowest-index argmax among unmasked actions;
    softmax distributes exp(score/T) over the unmasked set.
    """
    open_ids = np.flatnonzero(~masked)
    if open_ids.size == 0:
        raise ValueError("no unmasked action to select from")
    probs = np.zeros(len(scores))
    if dials.selection == "greedy":
        best = open_ids[int(np.argmax(scores[open_ids]))]
        probs[best] = 1.0
    else:
        probs[open_ids] = softmax(scores[open_ids] / dials.temperature)
    return probs


def select(scores: np.ndarray, masked: np.ndarray, dials: DialConfig,
           seed: int | None = None) -> int:
    """Pick an action: deterministic greedy, or seeded softmax sampling."""
    probs = selection_probs(scores, masked, dials)
    if dials.selection == "greedy":
        return int(np.argmax(probs))
    rng = np.random.default_rng(seed)
    return int(rng.choice(len(probs), p=probs))


def recommend_from_parts(q_mean: np.ndarray, q_std: np.ndarray, harm: np.ndarray,
                         local: LocalThresholds, costs: CostTable,
                         dials: DialConfig, seed: int | None = None) -> Recommendation:
    """Assemble the audit-trail recommendation for one state."""
    scores, masked, fallback = score_actions(q_mean, q_std, harm, local, costs, dials)
    chosen = select(scores, masked, dials, seed=seed)
    breakdown = tuple(
        ActionScore(
            action=a,
            q_mean=float(q_mean[a]),
            q_std=float(q_std[a]),
            p_harm=float(harm[a]),
            cost=float(costs.normalized[a]),
            tau_local=float(local.tau_local[a]),
            masked=bool(masked[a]),
            score=float(scores[a]),
        )
        for a in range(len(scores))
    )
    return Recommendation(
        action=chosen,
        selection=dials.selection,
        fallback=fallback,
        breakdown=breakdown,
        action_freq=tuple(float(f) for f in local.action_freq),
        seed=seed,
    )
