"""Policy-gradient training of the topology predictor with periodic skill evolution."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import mmgt, topology
from .designer import DesignerBackend, EvolutionAction, diagnose, evolve
from .embedding import EmbeddingCache, Embedder, HashingEmbedder, StaleCacheError
from .executor import AgentBackend, ExecutionError, Transcript, execute, failed_transcript
from .mmgt import ForwardTrace, MmgtParams, ModelDims
from .rng import derive_seed, stream
from .skill_bank import FailureRecord, SkillBank, retrieve_top_n
from .tasks import DEFAULT_CATEGORIES, Query, generate_tasks
from .topology import CommTopology, RolePrior

log = logging.getLogger(__name__)

# stream tags keep independent uses of the run seed apart
_INIT, _BATCH, _EVAL, _TRAIN_TASKS = 0x1817, 0xBA7C, 0xE7A1, 0x7A5C


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_agents: int = 4
    text_dim: int = 384
    image_dim: int = 32
    hidden: int = 64
    num_patches: int = 16
    layers: int = 2
    iterations: int = 300
    batch_size: int = 8
    evolve_period: int = 10
    learning_rate: float = 1e-3  # 1e-2 collapses node representations within a few Adam steps
    tau_f: int = 3
    mode: str = "Complete"
    density: float = 0.5
    seed: int = 0
    baseline: bool = False
    baseline_momentum: float = 0.9
    capacity: int = 16
    evolve: bool = True
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    train_tasks: int = 256
    tasks_path: str | None = None
    checkpoint_every: int = 50
    max_workers: int = 1

    def __post_init__(self) -> None:
        self.categories = tuple(self.categories)
        for name in ("n_agents", "text_dim", "image_dim", "hidden", "num_patches", "layers",
                     "iterations", "batch_size", "evolve_period", "tau_f", "capacity",
                     "train_tasks", "checkpoint_every", "max_workers"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate!r}")
        if self.n_agents < 2:
            raise ConfigError("n_agents must be >= 2")
        if not 0.0 < self.density <= 1.0:
            raise ConfigError("density must be in (0, 1]")
        try:
            self.mode = topology.Mode.parse(self.mode).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not self.categories:
            raise ConfigError("categories must be non-empty")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        return d

    @property
    def dims(self) -> ModelDims:
        return ModelDims(self.text_dim, self.image_dim, self.hidden, self.layers)

    def prior(self) -> RolePrior:
        return topology.candidate_edges(self.mode, self.n_agents, self.density, self.seed)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: MmgtParams, grads: dict[str, np.ndarray]) -> MmgtParams:
        self.step_count += 1
        t = self.step_count
        new = {}
        for name, value in params.tensors.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if g.shape != value.shape:
                raise mmgt.ShapeError(f"gradient for {name}: shape {g.shape}, expected {value.shape}")
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            new[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return MmgtParams(params.dims, new)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        self.m = {k[2:]: v for k, v in tensors.items() if k.startswith("m/")}
        self.v = {k[2:]: v for k, v in tensors.items() if k.startswith("v/")}
        self.step_count = step


@dataclass
class Inference:
    """Everything one query produced on its way to a reward."""
    query: Query
    skill_ids: list[int]
    q_text: np.ndarray
    x_agent: np.ndarray
    trace: ForwardTrace
    topology: CommTopology
    transcript: Transcript


def infer(query: Query, params: MmgtParams, bank: SkillBank, cache: EmbeddingCache,
          prior: RolePrior, backend: AgentBackend, rng: np.random.Generator,
          requires_grad: bool = True, rng_seed: int | None = None) -> Inference:
    if cache.stale:
        raise StaleCacheError("forward pass attempted with a stale embedding cache")
    q_text = cache.embedder.embed(query.question)
    skill_ids = retrieve_top_n(q_text, prior.n, cache)
    x_agent = cache.rows(skill_ids)
    trace = mmgt.forward(q_text, query.patches, x_agent, prior.role_pairs, params, requires_grad)
    graph = topology.sample_graph(trace.logits, prior, rng, rng_seed)
    roster = [bank[s] for s in skill_ids]
    try:
        transcript = execute(graph, query, roster, backend)
    except ExecutionError as err:
        log.warning("query %s: %s", query.id, err)
        transcript = failed_transcript(query, graph, err)
    return Inference(query, skill_ids, q_text, x_agent, trace, graph, transcript)


@dataclass
class StepResult:
    loss: float
    grads: dict[str, np.ndarray]
    items: list[Inference]
    rewards: list[float]
    log_probs: list[float]


def reinforce_loss(params: MmgtParams, items: Sequence[Inference], rewards: Sequence[float],
                   prior: RolePrior) -> float:
    """Loss value with sampled graphs and rewards held fixed (for finite differences)."""
    total = 0.0
    for item, r in zip(items, rewards):
        q = item.query
        logits = mmgt.forward(item.q_text, q.patches, item.x_agent, prior.role_pairs, params,
                              requires_grad=False).logits
        total += r * topology.log_prob(item.topology, logits, prior)
    return -total / len(items)


def policy_gradient(params: MmgtParams, items: Sequence[Inference], rewards: Sequence[float],
                    prior: RolePrior) -> tuple[float, dict[str, np.ndarray], list[float]]:
    """-(1/B) sum_b r_b log P(G_b) and its gradient; rewards enter as constants."""
    grads = {n: np.zeros_like(t) for n, t in params.tensors.items()}
    mask = prior.candidate_mask()
    total = 0.0
    log_probs = []
    b = len(items)
    for item, r in zip(items, rewards):
        logits = item.trace.logits
        lp = topology.log_prob(item.topology, logits, prior)
        log_probs.append(lp)
        total += r * lp
        if r == 0:
            continue
        upstream = (-r / b) * topology.log_prob_grad(item.topology, logits, prior)
        for name, g in mmgt.backward(item.trace, upstream, mask, params).items():
            grads[name] += g
    return -total / b, grads, log_probs


def record_outcomes(bank: SkillBank, items: Sequence[Inference],
                    designer_backend: DesignerBackend) -> None:
    """Credit each participating skill with the query outcome; log failures with lessons."""
    for item in items:
        t, q = item.transcript, item.query
        if t.failed_agent is not None or q.gold is None:
            continue
        correct = bool(t.reward)
        for sid in item.skill_ids:
            bank.record_outcome(sid, correct)
            if not correct:
                lesson = diagnose(q, t.final_answer, bank[sid], designer_backend)
                bank.push_failure(sid, FailureRecord(q.question, q.image_ref, t.final_answer,
                                                     q.gold, lesson))


def train_step(batch: Sequence[Query], params: MmgtParams, bank: SkillBank, cache: EmbeddingCache,
               prior: RolePrior, backend: AgentBackend, designer_backend: DesignerBackend,
               seeds: Sequence[int], baseline: float = 0.0, max_workers: int = 1) -> StepResult:
    if not batch:
        raise ValueError("empty batch")
    if cache.stale:
        raise StaleCacheError("train_step requires a fresh embedding cache")

    def one(k: int) -> Inference:
        return infer(batch[k], params, bank, cache, prior, backend,
                     np.random.Generator(np.random.PCG64(seeds[k])), rng_seed=seeds[k])

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            items = list(pool.map(one, range(len(batch))))
    else:
        items = [one(k) for k in range(len(batch))]
    rewards = [float(i.transcript.reward) for i in items]
    advantages = [r - baseline for r in rewards]
    loss, grads, log_probs = policy_gradient(params, items, advantages, prior)
    record_outcomes(bank, items, designer_backend)
    return StepResult(loss, grads, items, rewards, log_probs)


@dataclass
class TrainResult:
    params: MmgtParams
    bank: SkillBank
    log: list[dict]
    evolution_rounds: list[tuple[int, list[EvolutionAction]]] = field(default_factory=list)


ProgressHook = Callable[[int, MmgtParams, SkillBank, EmbeddingCache], None]


def run(config: TrainConfig, bank: SkillBank, backend: AgentBackend,
        designer_backend: DesignerBackend, tasks: Sequence[Query] | None = None,
        out_dir: str | Path | None = None, embedder: Embedder | None = None,
        params: MmgtParams | None = None, resume_from: str | Path | None = None,
        on_iteration: ProgressHook | None = None) -> TrainResult:
    """Train for ``config.iterations`` steps, evolving skills every ``evolve_period``."""
    if len(bank) < config.n_agents:
        raise ConfigError(f"bank holds {len(bank)} skills but {config.n_agents} agents need distinct ones")
    embedder = embedder or HashingEmbedder(config.text_dim)
    if embedder.dim != config.text_dim:
        raise ConfigError(f"embedder dim {embedder.dim} != text_dim {config.text_dim}")
    if tasks is None:
        tasks = generate_tasks(derive_seed(config.seed, _TRAIN_TASKS), config.train_tasks,
                               config.categories, config.num_patches, config.image_dim)
    prior = config.prior()
    params = params or MmgtParams.init(config.dims, stream(config.seed, _INIT))
    opt = Adam(config.learning_rate)
    baseline = 0.0
    start = 1
    if resume_from is not None:
        params, bank, start, baseline = _restore(Path(resume_from), opt)
    cache = EmbeddingCache(bank, embedder).rebuild()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume_from is None:
            (out / "log.jsonl").write_text("", encoding="utf-8")
    log_lines: list[dict] = []
    rounds: list[tuple[int, list[EvolutionAction]]] = []

    for t in range(start, config.iterations + 1):
        pick = stream(config.seed, t, _BATCH).choice(len(tasks), size=config.batch_size,
                                                     replace=len(tasks) < config.batch_size)
        batch = [tasks[k] for k in pick]
        seeds = [derive_seed(config.seed, t, b) for b in range(config.batch_size)]
        step = train_step(batch, params, bank, cache, prior, backend, designer_backend, seeds,
                          baseline if config.baseline else 0.0, config.max_workers)
        flagged = sum(i.transcript.failed_agent is not None for i in step.items)
        if flagged * 2 > len(batch):
            if out is not None:
                _checkpoint(out, params, opt, bank, t - 1, baseline)
            raise TrainingAborted(f"iteration {t}: {flagged}/{len(batch)} backend failures")
        params = opt.update(params, step.grads)
        mean_reward = float(np.mean(step.rewards))
        if config.baseline:
            baseline = config.baseline_momentum * baseline + (1 - config.baseline_momentum) * mean_reward

        actions: list[EvolutionAction] = []
        evolved = False
        if config.evolve and t % config.evolve_period == 0:
            actions = evolve(bank, config.tau_f, designer_backend)
            rounds.append((t, actions))
            evolved = True
            if cache.stale:
                cache.rebuild()

        entry = {
            "t": t,
            "loss": step.loss,
            "mean_reward": mean_reward,
            "edges_mean": float(np.mean([len(i.topology.edges) for i in step.items])),
            "bank_size": len(bank),
            "evolved": evolved,
            "n_modify": sum(a.kind == "Modify" for a in actions),
            "n_create": sum(a.kind == "Create" for a in actions),
        }
        log_lines.append(entry)
        if out is not None:
            with open(out / "log.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
            if t % config.checkpoint_every == 0:
                _checkpoint(out, params, opt, bank, t, baseline)
        if on_iteration is not None:
            on_iteration(t, params, bank, cache)

    if out is not None:
        _checkpoint(out, params, opt, bank, config.iterations, baseline)
    return TrainResult(params, bank, log_lines, rounds)


def _checkpoint(out: Path, params: MmgtParams, opt: Adam, bank: SkillBank, t: int,
                baseline: float) -> None:
    params.save(out / "params.mmgt")
    mmgt.write_tensors(out / "optimizer.mmgt", opt.state_tensors())
    bank.save(out / "bank.json")
    state = {"t": t, "adam_step": opt.step_count, "baseline": baseline, "capacity": bank.capacity}
    (out / "state.json").write_text(json.dumps(state) + "\n", encoding="utf-8")


def _restore(src: Path, opt: Adam) -> tuple[MmgtParams, SkillBank, int, float]:
    state = json.loads((src / "state.json").read_text(encoding="utf-8"))
    params = MmgtParams.load(src / "params.mmgt")
    opt_path = src / "optimizer.mmgt"
    opt.load_state(mmgt.read_tensors(opt_path) if opt_path.exists() else {}, state["adam_step"])
    bank = SkillBank.load(src / "bank.json", state.get("capacity", 16))
    return params, bank, state["t"] + 1, state.get("baseline", 0.0)


def evaluate(params: MmgtParams, bank: SkillBank, tasks: Sequence[Query], prior: RolePrior,
             backend: AgentBackend, seed: int, embedder: Embedder | None = None) -> float:
    """Accuracy of sampled-topology execution; leaves the bank untouched."""
    embedder = embedder or HashingEmbedder(params.dims.text_dim)
    cache = EmbeddingCache(bank, embedder).rebuild()
    hits = 0
    for k, q in enumerate(tasks):
        item = infer(q, params, bank, cache, prior, backend, stream(seed, k, _EVAL),
                     requires_grad=False)
        hits += item.transcript.reward
    return hits / len(tasks)
