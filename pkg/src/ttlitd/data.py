"""Logged-trajectory store: ingestion, feature maps, splits, synthetic data.

A dataset is a list of :class:`Episode`, each an ordered run of logged
decision steps for one member. States arrive as flat key->value documents
and are materialized into fixed-width z-scored feature vectors through a
:class:`FeatureMap` built on the training split only.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ParseError(ValueError):
    """Raised when an input row cannot be parsed."""


class ValidationError(ValueError):
    """Raised when parsed data violates a dataset invariant."""


@dataclass(frozen=True)
class Step:
    """One logged decision: (member, time, state, action, reward).

    Rewards are non-positive by construction: 0 means no adverse
    utilization in the follow-up window, negative means harm occurred.
    """

    member_id: str
    t: int
    state_doc: dict
    action: int
    reward: float

    def __post_init__(self):
        if self.t < 0:
            raise ValidationError(f"member {self.member_id}: negative time index {self.t}")
        if self.reward > 0:
            raise ValidationError(
                f"member {self.member_id} t={self.t}: positive reward {self.reward} "
                "(rewards must be <= 0)"
            )
        if self.action < 0:
            raise ValidationError(f"member {self.member_id} t={self.t}: negative action id")


@dataclass(frozen=True)
class Episode:
    """Ordered steps for one member, strictly increasing in t."""

    member_id: str
    steps: tuple[Step, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValidationError(f"member {self.member_id}: empty episode")
        for s in self.steps:
            if s.member_id != self.member_id:
                raise ValidationError(
                    f"episode {self.member_id} contains step for member {s.member_id}"
                )
        ts = [s.t for s in self.steps]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"member {self.member_id}: time indices not strictly increasing")

    def __len__(self) -> int:
        return len(self.steps)


def validate_actions(episodes: Sequence[Episode], n_actions: int) -> None:
    """Check every logged action id against the declared action count."""
    for ep in episodes:
        for s in ep.steps:
            if s.action >= n_actions:
                raise ValidationError(
                    f"member {s.member_id} t={s.t}: action {s.action} >= "
                    f"declared action count {n_actions}"
                )


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

_CSV_COLUMNS = ("member_id", "t", "state_json", "action", "reward")


def _row_to_step(member_id, t, state_doc, action, reward, where: str) -> Step:
    try:
        t = int(t)
        action = int(action)
        reward = float(reward)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: {exc}") from exc
    if not isinstance(state_doc, dict):
        raise ParseError(f"{where}: state document is not a flat object")
    return Step(str(member_id), t, state_doc, action, reward)


def ingest(path: str | Path, format: str, n_actions: int) -> list[Episode]:
    """Read logged steps from a CSV or JSONL file and group them into episodes.

    CSV columns: ``member_id,t,state_json,action,reward`` with ``state_json``
    holding the JSON-encoded state document. JSONL carries one step object per
    line with fields ``member_id,t,state_doc,action,reward``.

    Steps are grouped by member (episode order = first appearance in the
    file) and sorted by t within each member. Total row count is preserved.
    """
    path = Path(path)
    if format not in ("csv", "jsonl"):
        raise ValueError(f"unknown format {format!r} (expected 'csv' or 'jsonl')")
    steps: list[Step] = []
    if format == "csv":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(_CSV_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ParseError(f"{path}: missing columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                where = f"{path}:{lineno}"
                try:
                    doc = json.loads(row["state_json"])
                except (json.JSONDecodeError, TypeError) as exc:
                    raise ParseError(f"{where}: bad state_json ({exc})") from exc
                steps.append(
                    _row_to_step(row["member_id"], row["t"], doc, row["action"],
                                 row["reward"], where)
                )
    else:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                where = f"{path}:{lineno}"
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(f"{where}: bad JSON ({exc})") from exc
                try:
                    steps.append(
                        _row_to_step(obj["member_id"], obj["t"], obj["state_doc"],
                                     obj["action"], obj["reward"], where)
                    )
                except KeyError as exc:
                    raise ParseError(f"{where}: missing field {exc}") from exc

    by_member: dict[str, list[Step]] = {}
    for s in steps:
        by_member.setdefault(s.member_id, []).append(s)
    episodes = []
    for member_id, group in by_member.items():
        group.sort(key=lambda s: s.t)
        if len({s.t for s in group}) != len(group):
            raise ValidationError(f"member {member_id}: duplicate time indices")
        episodes.append(Episode(member_id, tuple(group)))
    validate_actions(episodes, n_actions)
    return episodes


def write_csv(episodes: Sequence[Episode], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for ep in episodes:
            for s in ep.steps:
                writer.writerow(
                    [s.member_id, s.t, json.dumps(s.state_doc, sort_keys=True),
                     s.action, repr(s.reward)]
                )


def write_jsonl(episodes: Sequence[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            for s in ep.steps:
                fh.write(json.dumps(
                    {"member_id": s.member_id, "t": s.t, "state_doc": s.state_doc,
                     "action": s.action, "reward": s.reward},
                    sort_keys=True))
                fh.write("\n")


# ---------------------------------------------------------------------------
# Flattened transition view
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transitions:
    """Parallel-array view of a list of episodes.

    ``prev_rewards[i]`` is the reward preceding step i within its episode
    (0.0 for the first step). ``next_idx[i]`` is the global index of the
    following step, or -1 when step i ends its episode. ``start_idx`` lists
    the global index of each episode's first step.
    """

    docs: tuple[dict, ...]
    member_ids: tuple[str, ...]
    t: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    prev_rewards: np.ndarray
    next_idx: np.ndarray
    episode_id: np.ndarray
    start_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def n_episodes(self) -> int:
        return len(self.start_idx)


def flatten(episodes: Sequence[Episode]) -> Transitions:
    """Flatten episodes into parallel arrays with prev-reward and next-step links."""
    docs, member_ids, ts, actions, rewards, prevs, nxt, epid, starts = \
        [], [], [], [], [], [], [], [], []
    idx = 0
    for e, ep in enumerate(episodes):
        starts.append(idx)
        prev = 0.0
        for j, s in enumerate(ep.steps):
            docs.append(s.state_doc)
            member_ids.append(s.member_id)
            ts.append(s.t)
            actions.append(s.action)
            rewards.append(s.reward)
            prevs.append(prev)
            nxt.append(idx + 1 if j + 1 < len(ep.steps) else -1)
            epid.append(e)
            prev = s.reward
            idx += 1
    return Transitions(
        docs=tuple(docs),
        member_ids=tuple(member_ids),
        t=np.asarray(ts, dtype=np.int64),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=np.asarray(rewards, dtype=np.float64),
        prev_rewards=np.asarray(prevs, dtype=np.float64),
        next_idx=np.asarray(nxt, dtype=np.int64),
        episode_id=np.asarray(epid, dtype=np.int64),
        start_idx=np.asarray(starts, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Feature map
# ---------------------------------------------------------------------------

_ZERO_STD = 1e-9  # below this a feature counts as constant and gets std 1.0


@dataclass(frozen=True)
class FeatureMap:
    """Fixed-width encoding of state documents plus temporal features.

    Layout: one column per selected state key (ranked by train-split
    variance, ties broken lexicographically), then the time index, then the
    previous reward. All columns are z-scored with train-split statistics.
    String values are encoded by their train-split relative frequency;
    missing keys are imputed with the train-split median of the encoding.
    """

    selected_keys: tuple[str, ...]
    means: np.ndarray
    stds: np.ndarray
    key_medians: np.ndarray
    category_freqs: dict[str, dict[str, float]]

    @property
    def width(self) -> int:
        return len(self.selected_keys) + 2

    def encode_value(self, key: str, value) -> float:
        if isinstance(value, bool):
            return float(value)
        if isinstance(value, (int, float)):
            return float(value)
        return self.category_freqs.get(key, {}).get(str(value), 0.0)


def _encode_raw(value, freqs: dict[str, float]) -> float:
    if isinstance(value, bool):
        return float(value)
    if isinstance(value, (int, float)):
        return float(value)
    return freqs.get(str(value), 0.0)


def build_feature_map(train_episodes: Sequence[Episode], max_keys: int = 64,
                      seed: int | None = None) -> FeatureMap:
    """Select up to ``max_keys`` state keys and fit normalization statistics.

    Keys are ranked by the variance of their numeric encoding over the
    training split (higher first, lexicographic tie-break). Selection and
    statistics depend only on the training data; ``seed`` is accepted for
    interface uniformity but the construction is deterministic.
    """
    del seed  # construction is deterministic
    if not train_episodes:
        raise ValidationError("cannot build a feature map from an empty training set")
    tr = flatten(train_episodes)
    n = len(tr)

    all_keys = sorted({k for doc in tr.docs for k in doc})
    freqs: dict[str, dict[str, float]] = {}
    columns: dict[str, np.ndarray] = {}
    medians: dict[str, float] = {}
    variances: dict[str, float] = {}
    for key in all_keys:
        raw = [doc[key] for doc in tr.docs if key in doc]
        str_counts: dict[str, int] = {}
        for v in raw:
            if not isinstance(v, (bool, int, float)):
                sv = str(v)
                str_counts[sv] = str_counts.get(sv, 0) + 1
        kf = {sv: c / len(raw) for sv, c in str_counts.items()}
        freqs[key] = kf
        present = np.array([_encode_raw(doc[key], kf) for doc in tr.docs if key in doc])
        med = float(np.median(present))
        col = np.full(n, med)
        mask = np.fromiter((key in doc for doc in tr.docs), dtype=bool, count=n)
        col[mask] = [_encode_raw(doc[key], kf) for doc in tr.docs if key in doc]
        columns[key] = col
        medians[key] = med
        variances[key] = float(np.var(col))

    ranked = sorted(all_keys, key=lambda k: (-variances[k], k))
    selected = tuple(ranked[:max_keys])

    cols = [columns[k] for k in selected]
    cols.append(tr.t.astype(np.float64))
    cols.append(tr.prev_rewards)
    matrix = np.column_stack(cols) if cols else np.zeros((n, 0))
    means = matrix.mean(axis=0)
    stds = matrix.std(axis=0)
    stds = np.where(stds < _ZERO_STD, 1.0, stds)
    return FeatureMap(
        selected_keys=selected,
        means=means,
        stds=stds,
        key_medians=np.array([medians[k] for k in selected]),
        category_freqs={k: freqs[k] for k in selected},
    )


def featurize(fm: FeatureMap, step: Step, prev_reward: float) -> np.ndarray:
    """Encode one step as a z-scored vector of width ``fm.width``.

    Pure function of (fm, step, prev_reward): missing keys fall back to the
    train-split median, unseen categories encode to frequency 0.
    """
    raw = np.empty(fm.width)
    for i, key in enumerate(fm.selected_keys):
        if key in step.state_doc:
            raw[i] = fm.encode_value(key, step.state_doc[key])
        else:
            raw[i] = fm.key_medians[i]
    raw[-2] = float(step.t)
    raw[-1] = float(prev_reward)
    return (raw - fm.means) / fm.stds


def feature_matrix(fm: FeatureMap, tr: Transitions) -> np.ndarray:
    """Vectorized featurize over a transition table; rows align with ``tr``."""
    n = len(tr)
    raw = np.empty((n, fm.width))
    for i, key in enumerate(fm.selected_keys):
        med = fm.key_medians[i]
        kf = fm.category_freqs.get(key, {})
        raw[:, i] = [
            _encode_raw(doc[key], kf) if key in doc else med for doc in tr.docs
        ]
    raw[:, -2] = tr.t
    raw[:, -1] = tr.prev_rewards
    return (raw - fm.means) / fm.stds


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

StepKey = tuple[str, int]


@dataclass(frozen=True)
class SplitAssignment:
    """Disjoint train/calibration/test step sets keyed by (member_id, t)."""

    train: frozenset[StepKey]
    calibration: frozenset[StepKey]
    test: frozenset[StepKey]

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.calibration), len(self.test)


def split(episodes: Sequence[Episode], mode: str = "temporal",
          ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)) -> SplitAssignment:
    """Assign each step to train/calibration/test.

    Temporal mode sorts all steps by (t, member_id) before cutting so every
    train step precedes every calibration step precedes every test step;
    index mode cuts in input order. Sizes are floor(n*r_train),
    floor(n*r_cal), remainder to test.
    """
    if mode not in ("temporal", "index"):
        raise ValueError(f"unknown split mode {mode!r}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    keys: list[StepKey] = [(s.member_id, s.t) for ep in episodes for s in ep.steps]
    n = len(keys)
    if n < 3:
        raise ValidationError(f"need at least 3 steps to split, got {n}")
    if len(set(keys)) != n:
        raise ValidationError("duplicate (member_id, t) steps across episodes")
    if mode == "temporal":
        keys.sort(key=lambda k: (k[1], k[0]))
    n_train = int(np.floor(n * ratios[0]))
    n_cal = int(np.floor(n * ratios[1]))
    return SplitAssignment(
        train=frozenset(keys[:n_train]),
        calibration=frozenset(keys[n_train:n_train + n_cal]),
        test=frozenset(keys[n_train + n_cal:]),
    )


def apply_split(episodes: Sequence[Episode], assignment: SplitAssignment
                ) -> tuple[list[Episode], list[Episode], list[Episode]]:
    """Materialize the three slices as episode lists.

    A member whose steps straddle a boundary contributes a partial episode
    to each slice; within a slice the retained steps keep their original
    order (still strictly increasing in t).
    """
    out: tuple[list[Episode], ...] = ([], [], [])
    parts = (assignment.train, assignment.calibration, assignment.test)
    for ep in episodes:
        for bucket, part in zip(out, parts):
            kept = tuple(s for s in ep.steps if (s.member_id, s.t) in part)
            if kept:
                bucket.append(Episode(ep.member_id, kept))
    return out


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

_DEFAULT_HARM_RATES = (0.20, 0.18, 0.15, 0.12, 0.11, 0.05, 0.06, 0.08, 0.10)

_CHANNELS = ("text", "phone", "video", "home")


@dataclass(frozen=True)
class SyntheticConfig:
    n_members: int = 500
    mean_len: float = 6.0
    n_actions: int = 9
    harm_base_rates: tuple[float, ...] = _DEFAULT_HARM_RATES
    seed: int = 0

    def __post_init__(self):
        if self.n_actions < 2:
            raise ValidationError(f"n_actions must be >= 2, got {self.n_actions}")
        if self.n_members < 1:
            raise ValidationError("n_members must be >= 1")
        if self.mean_len < 1:
            raise ValidationError("mean_len must be >= 1")
        if len(self.harm_base_rates) != self.n_actions:
            raise ValidationError(
                f"harm_base_rates has {len(self.harm_base_rates)} entries "
                f"for {self.n_actions} actions")
        if any(r < 0 or r > 1 for r in self.harm_base_rates):
            raise ValidationError("harm_base_rates must lie in [0, 1]")


# Planted coefficients: harm logit offsets per internal feature, and
# behavior-policy logit weights. Fixed constants so the truth object can
# recompute probabilities from any state document.
_HARM_W = np.array([-1.4, 0.9, 1.1, 0.7, 0.5])
_BEHAVIOR_SCALE = 0.6


def _planted_features(doc: dict) -> np.ndarray:
    """Internal harm-model features, recomputable from the document alone."""
    eng = float(doc.get("engagement_score", 0.5))
    tasks = float(doc.get("open_tasks", 2.0))
    ed = float(doc.get("recent_ed_visits", 0.5))
    alerts = float(doc.get("unresolved_alerts", 1.0))
    days = float(doc.get("days_since_contact", 10.0))
    return np.array([
        eng - 0.5,
        tasks / 4.0 - 0.5,
        ed / 2.0 - 0.25,
        alerts / 3.0 - 0.3,
        min(days, 30.0) / 30.0 - 0.4,
    ])


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth generator parameters, kept for test oracles."""

    base_rates: np.ndarray
    action_intercepts: np.ndarray  # logit-scale; NaN where base rate is 0
    harm_weights: np.ndarray
    behavior_intercepts: np.ndarray
    behavior_weights: np.ndarray  # (n_actions, 2) on (engagement, tasks)

    def harm_probability(self, doc: dict, action: int) -> float:
        if self.base_rates[action] <= 0.0:
            return 0.0
        z = self.action_intercepts[action] + float(self.harm_weights @ _planted_features(doc))
        return float(1.0 / (1.0 + np.exp(-z)))

    def behavior_probs(self, doc: dict) -> np.ndarray:
        x = _planted_features(doc)
        logits = self.behavior_intercepts + self.behavior_weights @ np.array([x[0], x[1]])
        logits = logits - logits.max()
        p = np.exp(logits)
        return p / p.sum()


@dataclass(frozen=True)
class SyntheticData:
    episodes: list[Episode]
    truth: SyntheticTruth
    config: SyntheticConfig


def _solve_intercept(etas: np.ndarray, target: float) -> float:
    """Bisect the intercept b so that mean(sigmoid(b + etas)) == target."""
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if float(np.mean(1.0 / (1.0 + np.exp(-(mid + etas))))) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(config: SyntheticConfig) -> SyntheticData:
    """Generate a seeded synthetic dataset with a known harm process.

    Harm is logistic in planted state features with per-action intercepts
    calibrated so that the mean harm probability of the steps logged under
    each action equals that action's base rate exactly. Rewards are 0 (no
    harm) or -1. State evolution is independent of actions and rewards.
    """
    rng = np.random.default_rng(config.seed)
    A = config.n_actions
    rates = np.asarray(config.harm_base_rates, dtype=np.float64)

    behavior_intercepts = rng.normal(0.0, 0.3, size=A)
    behavior_weights = rng.normal(0.0, _BEHAVIOR_SCALE, size=(A, 2))

    docs: list[dict] = []
    members: list[int] = []
    ts: list[int] = []
    actions_list: list[int] = []
    for m in range(config.n_members):
        length = 1 + rng.poisson(config.mean_len - 1.0)
        engagement = float(np.clip(rng.beta(2.0, 2.0), 0.01, 0.99))
        tasks = int(rng.poisson(2.0))
        ed_visits = int(rng.poisson(0.5))
        alerts = int(rng.poisson(1.0))
        days = float(rng.exponential(10.0))
        channel = _CHANNELS[int(rng.integers(len(_CHANNELS)))]
        for t in range(length):
            doc = {
                "engagement_score": round(engagement, 4),
                "open_tasks": tasks,
                "recent_ed_visits": ed_visits,
                "unresolved_alerts": alerts,
                "days_since_contact": round(days, 2),
                "channel_pref": channel,
            }
            # sparse dropout exercises median imputation downstream
            for key in list(doc):
                if key != "engagement_score" and rng.random() < 0.02:
                    del doc[key]
            x = _planted_features(doc)
            logits = behavior_intercepts + behavior_weights @ np.array([x[0], x[1]])
            logits = logits - logits.max()
            p = np.exp(logits)
            p /= p.sum()
            a = int(rng.choice(A, p=p))
            docs.append(doc)
            members.append(m)
            ts.append(t)
            actions_list.append(a)
            # drift the state for the next step
            engagement = float(np.clip(engagement + rng.normal(0.0, 0.08), 0.01, 0.99))
            tasks = max(0, tasks + int(rng.integers(-1, 2)))
            ed_visits = max(0, ed_visits + (1 if rng.random() < 0.05 else 0))
            alerts = max(0, alerts + int(rng.integers(-1, 2)))
            days = max(0.0, days + rng.normal(0.0, 3.0))

    actions = np.asarray(actions_list)
    etas = np.array([float(_HARM_W @ _planted_features(d)) for d in docs])
    intercepts = np.full(A, np.nan)
    probs = np.zeros(len(docs))
    for a in range(A):
        mask = actions == a
        if rates[a] <= 0.0:
            continue
        if mask.sum() == 0:
            intercepts[a] = float(np.log(rates[a] / (1.0 - rates[a])))
        else:
            intercepts[a] = _solve_intercept(etas[mask], rates[a])
        probs[mask] = 1.0 / (1.0 + np.exp(-(intercepts[a] + etas[mask])))
    rewards = np.where(rng.random(len(docs)) < probs, -1.0, 0.0)

    truth = SyntheticTruth(
        base_rates=rates,
        action_intercepts=intercepts,
        harm_weights=_HARM_W.copy(),
        behavior_intercepts=behavior_intercepts,
        behavior_weights=behavior_weights,
    )
    episodes: list[Episode] = []
    current: list[Step] = []
    current_member = -1
    for i, doc in enumerate(docs):
        if current and members[i] != current_member:
            episodes.append(Episode(current[0].member_id, tuple(current)))
            current = []
        current_member = members[i]
        current.append(Step(f"m{members[i]:06d}", ts[i], doc, int(actions[i]), float(rewards[i])))
    if current:
        episodes.append(Episode(current[0].member_id, tuple(current)))
    return SyntheticData(episodes=episodes, truth=truth, config=config)
