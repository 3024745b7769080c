"""Candidate edge priors and acyclic communication-graph sampling."""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .rng import stream


class Mode(str, Enum):
    LINEAR = "Linear"
    LAYERED = "Layered"
    CENTRALIZED = "Centralized"
    RANDOM = "Random"
    COMPLETE = "Complete"

    @classmethod
    def parse(cls, value: "str | Mode") -> "Mode":
        if isinstance(value, Mode):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown topology mode {value!r}; expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class RolePrior:
    mode: Mode
    n: int
    candidate_edges: tuple[tuple[int, int], ...]   # lexicographic
    role_pairs: frozenset[tuple[int, int]]          # candidates plus self-pairs

    def candidate_mask(self) -> np.ndarray:
        mask = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.candidate_edges:
            mask[i, j] = True
        return mask


@dataclass(frozen=True)
class CommTopology:
    n: int
    edges: frozenset[tuple[int, int]]
    realized: tuple[int, ...]       # accept bit per candidate edge, candidate order
    candidate_edges: tuple[tuple[int, int], ...]
    blocked: tuple[bool, ...] = ()  # per candidate: would have closed a cycle when visited
    rng_seed: int | None = None

    def predecessors(self, j: int) -> list[int]:
        return sorted(i for i, k in self.edges if k == j)


def candidate_edges(mode: "Mode | str", n: int, density: float = 0.5, seed: int = 0) -> RolePrior:
    mode = Mode.parse(mode)
    if n < 2:
        raise ValueError(f"need at least 2 agents, got {n}")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    all_pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    if mode is Mode.LINEAR:
        pairs = [(i, i + 1) for i in range(n - 1)]
    elif mode is Mode.LAYERED:
        split = math.ceil(n / 2)
        pairs = [(i, j) for i in range(split) for j in range(split, n)]
    elif mode is Mode.CENTRALIZED:
        pairs = [(0, i) for i in range(1, n)] + [(i, 0) for i in range(1, n)]
    elif mode is Mode.COMPLETE:
        pairs = all_pairs
    else:
        keep = stream(seed, n, 0x52414E44).random(len(all_pairs)) < density
        pairs = [p for p, k in zip(all_pairs, keep) if k]
    pairs = tuple(sorted(pairs))
    role = frozenset(pairs) | {(i, i) for i in range(n)}
    return RolePrior(mode, n, pairs, role)


def _reaches(adj: list[list[int]], src: int, dst: int) -> bool:
    """BFS: is there a directed path src -> dst?"""
    if src == dst:
        return True
    seen = [False] * len(adj)
    seen[src] = True
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for w in adj[u]:
            if w == dst:
                return True
            if not seen[w]:
                seen[w] = True
                queue.append(w)
    return False


def edge_probabilities(logits: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def sample_graph(logits: np.ndarray, prior: RolePrior, rng: np.random.Generator,
                 rng_seed: int | None = None) -> CommTopology:
    """Bernoulli-sample each candidate edge in order, zeroing any that would close a cycle.

    Every candidate consumes one uniform draw. Whether a pair is blocked is
    recorded independently of its draw, since a blocked pair's outcome is
    forced and carries no likelihood.
    """
    cands = prior.candidate_edges
    draws = rng.random(len(cands))
    probs = edge_probabilities(logits)
    adj: list[list[int]] = [[] for _ in range(prior.n)]
    realized, blocked = [], []
    for (i, j), u in zip(cands, draws):
        cyclic = bool(adj[j]) and _reaches(adj, j, i)
        accept = u < probs[i, j] and not cyclic
        if accept:
            adj[i].append(j)
        realized.append(int(accept))
        blocked.append(cyclic)
    edges = frozenset(e for e, a in zip(cands, realized) if a)
    return CommTopology(prior.n, edges, tuple(realized), cands, tuple(blocked), rng_seed)


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _live(topology: CommTopology) -> np.ndarray:
    if not topology.blocked:
        return np.ones(len(topology.candidate_edges), dtype=bool)
    return ~np.asarray(topology.blocked, dtype=bool)


def _check_order(topology: CommTopology, prior: RolePrior) -> None:
    if topology.candidate_edges != prior.candidate_edges:
        raise ValueError("topology candidate order does not match the prior")


def log_prob(topology: CommTopology, logits: np.ndarray, prior: RolePrior) -> float:
    """Sum over candidates of a log sigma(e) + (1 - a) log(1 - sigma(e)).

    Cycle-blocked candidates are skipped: their zero was forced, not drawn.
    """
    _check_order(topology, prior)
    live = _live(topology)
    if not live.any():
        return 0.0
    rows, cols = zip(*prior.candidate_edges)
    e = logits[list(rows), list(cols)][live]
    a = np.asarray(topology.realized, dtype=np.float64)[live]
    return float(np.sum(a * _log_sigmoid(e) + (1.0 - a) * _log_sigmoid(-e)))


def log_prob_grad(topology: CommTopology, logits: np.ndarray, prior: RolePrior) -> np.ndarray:
    """d log_prob / d logits as an N x N matrix, zero off the candidate set."""
    _check_order(topology, prior)
    grad = np.zeros_like(logits, dtype=np.float64)
    probs = edge_probabilities(logits)
    for (i, j), a, live in zip(prior.candidate_edges, topology.realized, _live(topology)):
        if live:
            grad[i, j] = a - probs[i, j]
    return grad


def topo_order(topology: CommTopology) -> list[int]:
    """Kahn's algorithm, always releasing the lowest ready index first."""
    indeg = [0] * topology.n
    succ: list[list[int]] = [[] for _ in range(topology.n)]
    for i, j in topology.edges:
        indeg[j] += 1
        succ[i].append(j)
    ready = [v for v in range(topology.n) if indeg[v] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for w in succ[u]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(ready, w)
    if len(order) != topology.n:
        raise ValueError("topology contains a cycle")
    return order


def to_dot(topology: CommTopology, name: str = "comm") -> str:
    lines = [f"digraph {name} {{"]
    lines += [f"  a{v};" for v in range(topology.n)]
    lines += [f"  a{i} -> a{j};" for i, j in sorted(topology.edges)]
    lines.append("}")
    return "\n".join(lines) + "\n"
