"""HTTP recommendation service over a loaded policy artifact.

Endpoints (JSON over HTTP):

- ``POST /v1/recommend``: full deliberation pipeline for one state, with a
  per-action audit breakdown and the TTL neighborhood's action frequencies.
- ``POST /v1/frontier``: efficiency frontier recomputed on a capped sample
  of the cached evaluation episodes.
- ``GET /v1/manifest``: the loaded artifact's manifest, version, and the
  active dial defaults.
- ``PUT /v1/dials``: admin update of the session's default dials (logged).
- ``GET /v1/samples``: server-chosen sample states for console clients.
- ``GET /v1/health``: liveness.

Artifact swaps are atomic: a request is served entirely by the bundle it
grabbed at entry. The no-gate threshold sentinel is serialized as JSON
``null`` (infinity is not representable in strict JSON).
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .artifact import PolicyArtifact
from .data import Episode
from .deliberation import DialConfig, Recommendation
from .harness import HarnessConfig, RunManifest, dials_from_dict, frontier


class RecommendRequest(BaseModel):
    state_doc: dict
    t: int = 0
    prev_reward: float = 0.0
    dials: dict | None = None
    seed: int | None = None


class ActionBreakdown(BaseModel):
    action: int
    label: str
    q_mean: float
    q_std: float
    p_harm: float
    cost: float
    tau_local: float | None  # null means no-gate
    masked: bool
    score: float


class RecommendResponse(BaseModel):
    action: int
    label: str
    selection: str
    fallback: bool
    artifact_version: int
    seed: int | None
    action_freq: list[float]
    breakdown: list[ActionBreakdown]


class FrontierRequest(BaseModel):
    lambda_costs: list[float]
    sample_size: int | None = None


class FrontierRowOut(BaseModel):
    lambda_cost: float
    expected_cost: float
    v0: float


class FrontierResponse(BaseModel):
    rows: list[FrontierRowOut]
    sample_episodes: int
    cap: int
    artifact_version: int


class SampleState(BaseModel):
    member_id: str
    t: int
    prev_reward: float
    state_doc: dict


@dataclass
class _Bundle:
    artifact: PolicyArtifact
    manifest: dict
    version: int


@dataclass
class ApiSession:
    """Mutable service state; the artifact bundle swaps atomically."""

    bundle: _Bundle
    dials: DialConfig
    episodes: Sequence[Episode] | None = None
    config: HarnessConfig = field(default_factory=HarnessConfig)
    frontier_cap: int = 2000
    requests_served: int = 0
    dial_audit_log: list = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def next_request(self) -> int:
        with self._lock:
            self.requests_served += 1
            return self.requests_served

    def swap_artifact(self, artifact: PolicyArtifact,
                      manifest: RunManifest | dict | None = None) -> int:
        """Replace the served artifact; in-flight requests keep the old one."""
        mdict = manifest.to_dict() if isinstance(manifest, RunManifest) else (manifest or {})
        with self._lock:
            self.bundle = _Bundle(artifact, mdict, self.bundle.version + 1)
            return self.bundle.version

    def set_dials(self, changes: dict) -> DialConfig:
        with self._lock:
            new = dials_from_dict(changes, base=self.dials)
            self.dial_audit_log.append({"changes": dict(changes),
                                        "request_index": self.requests_served})
            self.dials = new
            return new


def _dials_as_wire(dials: DialConfig) -> dict:
    return {
        "alpha": dials.alpha,
        "K": dials.k_neighbors,
        "eta": dials.eta,
        "beta": dials.beta,
        "lambda": dials.risk_penalty,
        "lambda_cost": dials.cost_penalty,
        "T": dials.temperature,
        "gating": dials.gating,
        "selection": dials.selection,
    }


def _validate_state_doc(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise HTTPException(status_code=422, detail="state_doc must be an object")
    for key, value in doc.items():
        if not isinstance(value, (bool, int, float, str)):
            raise HTTPException(
                status_code=422,
                detail=f"state_doc field {key!r} must be a number or string")


def _recommendation_response(rec: Recommendation, artifact: PolicyArtifact,
                             version: int) -> RecommendResponse:
    breakdown = [
        ActionBreakdown(
            action=b.action,
            label=artifact.costs.labels[b.action],
            q_mean=b.q_mean,
            q_std=b.q_std,
            p_harm=b.p_harm,
            cost=b.cost,
            tau_local=None if math.isinf(b.tau_local) else b.tau_local,
            masked=b.masked,
            score=b.score,
        )
        for b in rec.breakdown
    ]
    return RecommendResponse(
        action=rec.action,
        label=artifact.costs.labels[rec.action],
        selection=rec.selection,
        fallback=rec.fallback,
        artifact_version=version,
        seed=rec.seed,
        action_freq=list(rec.action_freq),
        breakdown=breakdown,
    )


def create_app(artifact: PolicyArtifact, manifest: RunManifest | dict | None = None,
               episodes: Sequence[Episode] | None = None,
               dials: DialConfig | None = None,
               config: HarnessConfig | None = None,
               frontier_cap: int = 2000) -> FastAPI:
    """Build the service app around one artifact (plus optional eval episodes)."""
    mdict = manifest.to_dict() if isinstance(manifest, RunManifest) else (manifest or {})
    session = ApiSession(
        bundle=_Bundle(artifact, mdict, 1),
        dials=dials or artifact.dials,
        episodes=list(episodes) if episodes else None,
        config=config or HarnessConfig(),
        frontier_cap=frontier_cap,
    )
    app = FastAPI(title="ttlitd recommendation service")
    app.state.session = session

    @app.get("/v1/health")
    def health():
        bundle = session.bundle
        return {"status": "ok", "artifact_version": bundle.version,
                "requests_served": session.requests_served}

    @app.post("/v1/recommend", response_model=RecommendResponse)
    def recommend(req: RecommendRequest):
        bundle = session.bundle  # one bundle per request: atomic swap safety
        session.next_request()
        _validate_state_doc(req.state_doc)
        if req.t < 0:
            raise HTTPException(status_code=422, detail="t must be >= 0")
        try:
            run_dials = (dials_from_dict(req.dials, base=session.dials)
                         if req.dials else session.dials)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        rec = bundle.artifact.recommend(req.state_doc, req.t, req.prev_reward,
                                        dials=run_dials, seed=req.seed)
        return _recommendation_response(rec, bundle.artifact, bundle.version)

    @app.post("/v1/frontier", response_model=FrontierResponse)
    def frontier_endpoint(req: FrontierRequest):
        bundle = session.bundle
        session.next_request()
        if not req.lambda_costs:
            raise HTTPException(status_code=422, detail="lambda_costs must be non-empty")
        if session.episodes is None:
            raise HTTPException(status_code=503,
                                detail="no evaluation episodes cached at startup")
        cap = min(req.sample_size or session.frontier_cap, session.frontier_cap)
        sample = session.episodes[:cap]
        rows = frontier(bundle.artifact, sample, lambda_costs=req.lambda_costs,
                        dials=session.dials, config=session.config)
        return FrontierResponse(
            rows=[FrontierRowOut(lambda_cost=r.lambda_cost,
                                 expected_cost=r.expected_cost, v0=r.v0)
                  for r in rows],
            sample_episodes=len(sample),
            cap=session.frontier_cap,
            artifact_version=bundle.version,
        )

    @app.get("/v1/manifest")
    def manifest_endpoint():
        bundle = session.bundle
        return {
            "artifact_version": bundle.version,
            "artifact_hash": bundle.artifact.content_hash(),
            "dials": _dials_as_wire(session.dials),
            "frontier_cap": session.frontier_cap,
            "manifest": bundle.manifest,
        }

    @app.put("/v1/dials")
    def set_dials(changes: dict):
        try:
            new = session.set_dials(changes)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {"dials": _dials_as_wire(new), "audit_entries": len(session.dial_audit_log)}

    @app.get("/v1/samples")
    def samples(n: int = 5):
        if session.episodes is None:
            raise HTTPException(status_code=503,
                                detail="no evaluation episodes cached at startup")
        n = max(1, min(n, len(session.episodes)))
        picks = np.linspace(0, len(session.episodes) - 1, n).astype(int)
        out = []
        for i in dict.fromkeys(int(p) for p in picks):
            ep = session.episodes[i]
            s = ep.steps[0]
            out.append(SampleState(member_id=s.member_id, t=s.t, prev_reward=0.0,
                                   state_doc=s.state_doc))
        return {"samples": out}

    return app
