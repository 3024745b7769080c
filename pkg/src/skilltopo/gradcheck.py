"""Central finite-difference checks for the MMGT pipeline and the policy-gradient loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mmgt, topology
from .mmgt import MmgtParams, ModelDims
from .rng import stream
from .trainer import policy_gradient, reinforce_loss

EPS = 1e-4
TOLERANCE = 1e-3
# below this both sides are numerically zero and the ratio is meaningless
ABS_FLOOR = 1e-9

SUITE_DIMS = ModelDims(text_dim=16, image_dim=8, hidden=16, layers=2)
SUITE_AGENTS = 4
SUITE_PATCHES = 4
SUITE_MODES = ("Complete", "Linear", "Layered", "Centralized", "Random")


@dataclass(frozen=True)
class Probe:
    seed: int
    loss: str
    tensor: str
    kind: str        # "direction" or "coordinate"
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        if scale < ABS_FLOOR:
            return 0.0
        return abs(self.analytic - self.numeric) / scale

    @property
    def ok(self) -> bool:
        return self.rel_err <= TOLERANCE


@dataclass
class SuiteReport:
    probes: list[Probe]
    seconds: float

    @property
    def ok(self) -> bool:
        return all(p.ok for p in self.probes)

    def worst(self) -> Probe:
        return max(self.probes, key=lambda p: p.rel_err)


@dataclass
class _Frozen:
    """A sampled graph with its inputs, enough to recompute its log-likelihood."""
    q_text: np.ndarray
    x_agent: np.ndarray
    patches: np.ndarray
    trace: mmgt.ForwardTrace
    topology: topology.CommTopology

    @property
    def query(self) -> "_Frozen":
        return self


def random_params(dims: ModelDims, rng: np.random.Generator) -> MmgtParams:
    """Initial weights with LayerNorm affines and biases jittered off their defaults."""
    params = MmgtParams.init(dims, rng)
    tensors = {}
    for name, value in params.tensors.items():
        if name.endswith(("gamma", "beta", ".b1", ".b2")) or name == "edge.b":
            value = value + rng.normal(0.0, 0.2, size=value.shape)
        tensors[name] = value
    return params.with_tensors(tensors)


def check_tensors(params: MmgtParams, loss_fn: Callable[[MmgtParams], float],
                  grads: dict[str, np.ndarray], rng: np.random.Generator,
                  seed: int, loss_name: str, eps: float = EPS) -> list[Probe]:
    """Per tensor: one random unit direction plus the coordinate of largest |grad|."""
    probes = []
    for name in params.names():
        value, g = params[name], grads[name]
        u = rng.normal(size=value.shape)
        u /= np.linalg.norm(u) or 1.0
        basis = np.zeros_like(value)
        basis[np.unravel_index(int(np.argmax(np.abs(g))), value.shape)] = 1.0
        for kind, direction in (("direction", u), ("coordinate", basis)):
            plus = loss_fn(params.replace(**{name: value + eps * direction}))
            minus = loss_fn(params.replace(**{name: value - eps * direction}))
            probes.append(Probe(seed, loss_name, name, kind, float(np.sum(g * direction)),
                                (plus - minus) / (2 * eps)))
    return probes


def _inputs(dims: ModelDims, n: int, p: int, rng: np.random.Generator):
    q = rng.normal(size=dims.text_dim)
    patches = rng.normal(size=(p, dims.image_dim))
    x = rng.normal(size=(n, dims.text_dim))
    return q / np.linalg.norm(q), patches, x / np.linalg.norm(x, axis=1, keepdims=True)


def check_mean_logit(seed: int, dims: ModelDims = SUITE_DIMS, n: int = SUITE_AGENTS,
                     p: int = SUITE_PATCHES, mode: str = "Complete") -> list[Probe]:
    rng = stream(seed, 0x6C6F)
    params = random_params(dims, rng)
    q, patches, x = _inputs(dims, n, p, rng)
    prior = topology.candidate_edges(mode, n, seed=seed)
    mask = prior.candidate_mask()
    weight = mask / mask.sum()

    def loss(ps: MmgtParams) -> float:
        out = mmgt.forward(q, patches, x, prior.role_pairs, ps, requires_grad=False)
        return float(np.sum(out.logits * weight))

    trace = mmgt.forward(q, patches, x, prior.role_pairs, params)
    grads = mmgt.backward(trace, weight, mask, params)
    return check_tensors(params, loss, grads, rng, seed, f"mean_logit[{mode}]")


def check_policy_loss(seed: int, dims: ModelDims = SUITE_DIMS, n: int = SUITE_AGENTS,
                      p: int = SUITE_PATCHES, batch: int = 4, mode: str = "Complete") -> list[Probe]:
    rng = stream(seed, 0x7066)
    params = random_params(dims, rng)
    prior = topology.candidate_edges(mode, n, seed=seed)
    items = []
    for b in range(batch):
        q, patches, x = _inputs(dims, n, p, rng)
        trace = mmgt.forward(q, patches, x, prior.role_pairs, params)
        graph = topology.sample_graph(trace.logits, prior, rng)
        items.append(_Frozen(q, x, patches, trace, graph))
    rewards = [float(r) for r in rng.integers(0, 2, size=batch)]
    rewards[0] = 1.0  # at least one non-zero term

    _, grads, _ = policy_gradient(params, items, rewards, prior)
    return check_tensors(params, lambda ps: reinforce_loss(ps, items, rewards, prior),
                         grads, rng, seed, f"policy[{mode}]")


def run_suite(seeds: range | list[int] = range(10)) -> SuiteReport:
    start = time.perf_counter()
    probes: list[Probe] = []
    for seed in seeds:
        mode = SUITE_MODES[seed % len(SUITE_MODES)]
        probes += check_mean_logit(seed, mode=mode)
        probes += check_policy_loss(seed, mode=mode)
    return SuiteReport(probes, time.perf_counter() - start)
