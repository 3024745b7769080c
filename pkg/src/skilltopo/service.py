"""HTTP service around a live skill bank and topology model."""
from __future__ import annotations

import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import mmgt, topology
from .designer import DesignerBackend, MockDesigner, evolve
from .embedding import EmbeddingCache, HashingEmbedder
from .mmgt import MmgtParams
from .rng import stream
from .skill_bank import FailureRecord, SkillBank, UnknownSkillError, retrieve_top_n, seed_bank
from .trainer import TrainConfig


class SkillIn(BaseModel):
    trigger: str = Field(min_length=1)
    strategy: str = Field(min_length=1)


class FailureIn(BaseModel):
    question: str
    image_ref: str = ""
    predicted: str
    gold: str
    lesson: str = ""


class SkillOut(BaseModel):
    id: int
    trigger: str
    strategy: str
    n_succ: int
    n_use: int
    accuracy: float
    version: int
    failures: int


class OutcomeIn(BaseModel):
    correct: bool
    failure: FailureIn | None = None


class TopologyRequest(BaseModel):
    question: str = Field(min_length=1)
    patches: list[list[float]] | None = None
    seed: int = 0


class TopologyOut(BaseModel):
    skill_ids: list[int]
    edges: list[tuple[int, int]]
    order: list[int]
    logits: list[list[float]]
    dot: str


class EvolveIn(BaseModel):
    tau_f: int = Field(default=3, ge=1)


class ActionOut(BaseModel):
    kind: str
    trigger: str
    strategy: str
    skill_id: int | None


class Health(BaseModel):
    status: str
    skills: int
    params_digest: str


def _skill_out(s) -> SkillOut:
    return SkillOut(id=s.id, trigger=s.trigger, strategy=s.strategy, n_succ=s.n_succ,
                    n_use=s.n_use, accuracy=s.accuracy, version=s.version,
                    failures=len(s.failures))


class ServiceState:
    """Bank, parameters and embedding cache behind one lock."""

    def __init__(self, bank: SkillBank, params: MmgtParams, config: TrainConfig,
                 designer: DesignerBackend) -> None:
        self.bank = bank
        self.params = params
        self.config = config
        self.designer = designer
        self.prior = config.prior()
        self.cache = EmbeddingCache(bank, HashingEmbedder(params.dims.text_dim)).rebuild()
        self.lock = threading.Lock()

    def fresh_cache(self) -> EmbeddingCache:
        if self.cache.stale:
            self.cache.rebuild()
        return self.cache


def create_app(bank: SkillBank | None = None, checkpoint: str | Path | None = None,
               designer: DesignerBackend | None = None) -> FastAPI:
    config = TrainConfig()
    if checkpoint is not None:
        ckpt = Path(checkpoint)
        if (ckpt / "config.json").exists():
            config = TrainConfig.load(ckpt / "config.json")
        params = MmgtParams.load(ckpt / "params.mmgt")
        if bank is None and (ckpt / "bank.json").exists():
            bank = SkillBank.load(ckpt / "bank.json", config.capacity)
    else:
        params = MmgtParams.init(config.dims, stream(config.seed, 0x1817))
    state = ServiceState(bank if bank is not None else seed_bank(config.capacity), params,
                         config, designer or MockDesigner())
    app = FastAPI(title="skilltopo")
    app.state.svc = state

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", skills=len(state.bank), params_digest=state.params.digest())

    @app.get("/skills", response_model=list[SkillOut])
    def list_skills():
        with state.lock:
            return [_skill_out(s) for s in state.bank]

    @app.get("/skills/{skill_id}", response_model=SkillOut)
    def get_skill(skill_id: int):
        with state.lock:
            try:
                return _skill_out(state.bank[skill_id])
            except UnknownSkillError:
                raise HTTPException(404, f"no skill {skill_id}") from None

    @app.post("/skills", response_model=SkillOut, status_code=201)
    def add_skill(body: SkillIn):
        with state.lock:
            sid = state.bank.add_skill(body.trigger, body.strategy)
            return _skill_out(state.bank[sid])

    @app.post("/skills/{skill_id}/outcome", response_model=SkillOut)
    def record_outcome(skill_id: int, body: OutcomeIn):
        with state.lock:
            try:
                state.bank.record_outcome(skill_id, body.correct)
                if body.failure is not None and not body.correct:
                    f = body.failure
                    state.bank.push_failure(skill_id, FailureRecord(
                        f.question, f.image_ref, f.predicted, f.gold, f.lesson))
            except UnknownSkillError:
                raise HTTPException(404, f"no skill {skill_id}") from None
            except ValueError as exc:
                raise HTTPException(422, str(exc)) from None
            return _skill_out(state.bank[skill_id])

    @app.post("/topology", response_model=TopologyOut)
    def predict_topology(body: TopologyRequest):
        dims = state.params.dims
        if body.patches is None:
            patches = np.zeros((state.config.num_patches, dims.image_dim))
        else:
            patches = np.asarray(body.patches, dtype=np.float64)
            if patches.ndim != 2 or patches.shape[1] != dims.image_dim or len(patches) == 0:
                raise HTTPException(422, f"patches must be P x {dims.image_dim}")
        with state.lock:
            if len(state.bank) < state.prior.n:
                raise HTTPException(409, f"bank has fewer than {state.prior.n} skills")
            cache = state.fresh_cache()
            q = cache.embedder.embed(body.question)
            ids = retrieve_top_n(q, state.prior.n, cache)
            x = cache.rows(ids)
        trace = mmgt.forward(q, patches, x, state.prior.role_pairs, state.params, requires_grad=False)
        graph = topology.sample_graph(trace.logits, state.prior, stream(body.seed, 0x60F))
        return TopologyOut(skill_ids=ids, edges=sorted(graph.edges),
                           order=topology.topo_order(graph), logits=trace.logits.tolist(),
                           dot=topology.to_dot(graph))

    @app.post("/evolve", response_model=list[ActionOut])
    def run_evolution(body: EvolveIn):
        with state.lock:
            actions = evolve(state.bank, body.tau_f, state.designer)
        return [ActionOut(kind=a.kind, trigger=a.trigger, strategy=a.strategy,
                          skill_id=a.target if a.kind == "Modify" else a.created_id)
                for a in actions]

    return app
