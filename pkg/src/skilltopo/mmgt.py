"""Multimodal graph transformer: query + agent skills + role prior -> edge logits.

All weights act on row vectors: a (rows x in) activation is multiplied by an
(in x out) matrix, except the input projections ``W_t``, ``W_img``,
``W_node`` and ``W_g`` which are stored (out x in) and applied transposed.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor

ROLE_BIAS = -1.0e4
LN_EPS = 1e-5

_ATTN = ("W_Q", "W_K", "W_V", "W_O")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    text_dim: int = 384      # D
    image_dim: int = 32      # D_img
    hidden: int = 64         # d
    layers: int = 2          # L


def parameter_shapes(dims: ModelDims) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes; dict order is the canonical order."""
    d, D, Di = dims.hidden, dims.text_dim, dims.image_dim
    shapes: dict[str, tuple[int, ...]] = {
        "query.W_t": (d, D),
        "query.W_img": (d, Di),
    }
    shapes.update({f"query.attn.{w}": (d, d) for w in _ATTN})
    shapes.update({"query.ln.gamma": (d,), "query.ln.beta": (d,)})
    shapes.update({"node.W_node": (d, D), "node.ln.gamma": (d,), "node.ln.beta": (d,)})
    shapes["select.W_g"] = (d, 2 * d)
    shapes.update({f"select.attn.{w}": (d, d) for w in _ATTN})
    shapes.update({"select.ln.gamma": (d,), "select.ln.beta": (d,)})
    for layer in range(dims.layers):
        g = f"gtl{layer}"
        shapes.update({f"{g}.attn.{w}": (d, d) for w in _ATTN})
        shapes.update({f"{g}.ln1.gamma": (d,), f"{g}.ln1.beta": (d,)})
        shapes.update({f"{g}.ffn.W1": (d, 4 * d), f"{g}.ffn.b1": (4 * d,),
                       f"{g}.ffn.W2": (4 * d, d), f"{g}.ffn.b2": (d,)})
        shapes.update({f"{g}.ln2.gamma": (d,), f"{g}.ln2.beta": (d,)})
        r = f"grnl{layer}"
        shapes.update({f"{r}.gather.{w}": (d, d) for w in _ATTN})
        shapes.update({f"{r}.ln1.gamma": (d,), f"{r}.ln1.beta": (d,)})
        shapes.update({f"{r}.scatter.{w}": (d, d) for w in _ATTN})
        shapes.update({f"{r}.ln2.gamma": (d,), f"{r}.ln2.beta": (d,)})
    shapes.update({"edge.W_edge": (d, d), "edge.b": ()})
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name in ("query.W_t", "query.W_img", "node.W_node", "select.W_g"):
        return shape[1]
    if name == "edge.W_edge":
        # the bilinear score sums d*d products h_i[a] W[a, b] h_j[b]
        return shape[0] * shape[1]
    return shape[0]


class MmgtParams:
    """Immutable-by-convention mapping of parameter name -> float64 array."""

    def __init__(self, dims: ModelDims, tensors: Mapping[str, np.ndarray]) -> None:
        expected = parameter_shapes(dims)
        if list(tensors) != list(expected):
            missing = set(expected) ^ set(tensors)
            raise ShapeError(f"parameter set mismatch: {sorted(missing)[:5]}"
                             if missing else "parameter order is not canonical")
        for name, shape in expected.items():
            arr = tensors[name]
            if arr.shape != shape:
                raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")
        self.dims = dims
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    @classmethod
    def init(cls, dims: ModelDims, rng: np.random.Generator) -> "MmgtParams":
        tensors = {}
        for name, shape in parameter_shapes(dims).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf == "gamma":
                tensors[name] = np.ones(shape)
            elif leaf in ("beta", "b1", "b2", "b"):
                tensors[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(_fan_in(name, shape))
                tensors[name] = rng.uniform(-bound, bound, size=shape)
        return cls(dims, tensors)

    @classmethod
    def zeros(cls, dims: ModelDims) -> "MmgtParams":
        """All weights zero, LayerNorm affine at identity."""
        return cls(dims, {n: np.ones(s) if n.endswith(".gamma") else np.zeros(s)
                          for n, s in parameter_shapes(dims).items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def replace(self, **updates: np.ndarray) -> "MmgtParams":
        """Copy with some tensors swapped; keyword names use '__' for '.'."""
        tensors = dict(self.tensors)
        for key, value in updates.items():
            tensors[key.replace("__", ".")] = np.asarray(value, dtype=np.float64)
        return MmgtParams(self.dims, tensors)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "MmgtParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        return MmgtParams(self.dims, merged)

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors.values()])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        write_tensors(path, self.tensors)

    @classmethod
    def load(cls, path: str | Path, dims: ModelDims | None = None) -> "MmgtParams":
        tensors = read_tensors(path)
        return cls(dims or infer_dims(tensors), tensors)


def infer_dims(tensors: Mapping[str, np.ndarray]) -> ModelDims:
    d, D = tensors["query.W_t"].shape
    layers = sum(1 for n in tensors if n.startswith("gtl") and n.endswith(".attn.W_Q"))
    return ModelDims(text_dim=D, image_dim=tensors["query.W_img"].shape[1], hidden=d, layers=layers)


# -- checkpoint format --------------------------------------------------------

MAGIC = b"MMGT"
FORMAT_VERSION = 1


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Binary checkpoint: magic, version byte, then per tensor
    (u32 name length, name, u32 rank, u32 dims..., f64 data row-major), all little-endian."""
    chunks = [MAGIC, bytes([FORMAT_VERSION])]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an MMGT checkpoint")
    if buf[4] != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {buf[4]}")
    pos = 5
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint at byte {pos}") from exc
    return out


def read_patch_file(path: str | Path) -> np.ndarray:
    """Patch features: two little-endian int32 (rows, cols), then float32 row-major."""
    buf = Path(path).read_bytes()
    rows, cols = struct.unpack_from("<ii", buf, 0)
    if rows < 0 or cols < 0 or len(buf) != 8 + 4 * rows * cols:
        raise ValueError(f"{path}: malformed patch file")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(rows, cols).astype(np.float64)


def write_patch_file(path: str | Path, patches: np.ndarray) -> None:
    patches = np.asarray(patches)
    header = struct.pack("<ii", *patches.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(patches, dtype="<f4").tobytes())


# -- forward building blocks ---------------------------------------------------

class _Leaves:
    """Parameter tensors wrapped as autograd leaves for one forward pass."""

    def __init__(self, params: MmgtParams, requires_grad: bool) -> None:
        wrap = ag.parameter if requires_grad else ag.constant
        self.t = {name: wrap(arr) for name, arr in params.tensors.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.t[name]

    def ln(self, x: Tensor, prefix: str) -> Tensor:
        return ag.layer_norm(x, self.t[f"{prefix}.gamma"], self.t[f"{prefix}.beta"], LN_EPS)


def cross_attention(query: Tensor, keys: Tensor, leaves: _Leaves, prefix: str,
                    bias: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Single-head scaled dot-product attention of ``query`` rows over ``keys`` rows.

    Returns (output, attention weights).
    """
    d = query.shape[-1]
    q = query @ leaves[f"{prefix}.W_Q"]
    k = keys @ leaves[f"{prefix}.W_K"]
    v = keys @ leaves[f"{prefix}.W_V"]
    scores = ag.scale(q @ k.T, 1.0 / math.sqrt(d))
    if bias is not None:
        scores = scores + ag.constant(bias)
    weights = ag.softmax(scores)
    return (weights @ v) @ leaves[f"{prefix}.W_O"], weights


def _check(name: str, arr: np.ndarray, shape: tuple[int, ...]) -> None:
    if arr.shape != shape:
        raise ShapeError(f"{name}: shape {arr.shape}, expected {shape}")


def encode_query(q_text: Tensor, patches: Tensor, leaves: _Leaves) -> tuple[Tensor, Tensor]:
    """Relay vector v (1 x d) from the question embedding and projected patches."""
    t = q_text @ leaves["query.W_t"].T
    img = patches @ leaves["query.W_img"].T
    attended, _ = cross_attention(t, img, leaves, "query.attn")
    return leaves.ln(attended + t, "query.ln"), img


def project_nodes(x_agent: Tensor, leaves: _Leaves) -> Tensor:
    return ag.gelu(leaves.ln(x_agent @ leaves["node.W_node"].T, "node.ln"))


def selective_image_attention(h0: Tensor, v: Tensor, img: Tensor, leaves: _Leaves):
    """Per-agent gated image attention; returns (H1, gates, gated queries)."""
    n = h0.shape[0]
    v_rows = ag.matmul(ag.constant(np.ones((n, 1))), v)
    gates = ag.sigmoid(ag.concat([h0, v_rows], axis=1) @ leaves["select.W_g"].T)
    gated = h0 + gates * v_rows
    attended, _ = cross_attention(gated, img, leaves, "select.attn")
    return leaves.ln(h0 + attended, "select.ln"), gates, gated


def gtl_layer(h: Tensor, bias: np.ndarray, leaves: _Leaves, layer: int) -> Tensor:
    p = f"gtl{layer}"
    attended, _ = cross_attention(h, h, leaves, f"{p}.attn", bias)
    h1 = leaves.ln(h + attended, f"{p}.ln1")
    ffn = ag.gelu(h1 @ leaves[f"{p}.ffn.W1"] + leaves[f"{p}.ffn.b1"]) @ leaves[f"{p}.ffn.W2"] + leaves[f"{p}.ffn.b2"]
    return leaves.ln(h1 + ffn, f"{p}.ln2")


def grnl_layer(v: Tensor, h: Tensor, leaves: _Leaves, layer: int) -> tuple[Tensor, Tensor]:
    p = f"grnl{layer}"
    gathered, _ = cross_attention(v, h, leaves, f"{p}.gather")
    v_new = leaves.ln(v + gathered, f"{p}.ln1")
    scattered, _ = cross_attention(h, v_new, leaves, f"{p}.scatter")
    return v_new, leaves.ln(h + scattered, f"{p}.ln2")


def edge_logits(h: Tensor, leaves: _Leaves) -> tuple[Tensor, Tensor]:
    """Bilinear directed scores e_ij = h_i W h_j + b and their tanh squashing."""
    raw = (h @ leaves["edge.W_edge"]) @ h.T + leaves["edge.b"]
    return raw, ag.tanh(raw)


def role_bias(role_pairs: Iterable[tuple[int, int]], n: int) -> np.ndarray:
    """Additive attention bias: 0 on permitted pairs, -1e4 elsewhere."""
    bias = np.full((n, n), ROLE_BIAS)
    for i, j in role_pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"role pair ({i}, {j}) out of range for N={n}")
        bias[i, j] = 0.0
    return bias


@dataclass
class ForwardTrace:
    v: list[np.ndarray]          # relay vector after encoding, then after each layer
    h0: np.ndarray
    h1: np.ndarray
    h_layers: list[np.ndarray]   # agent states after each GTL+GRNL round
    gates: np.ndarray
    gated_queries: np.ndarray
    raw_logits: np.ndarray
    logits: np.ndarray           # tanh-normalized, in [-1, 1]
    params: MmgtParams
    _leaves: _Leaves
    _out: Tensor


def forward(q_text: np.ndarray, patches: np.ndarray, x_agent: np.ndarray,
            role_pairs: Iterable[tuple[int, int]], params: MmgtParams,
            requires_grad: bool = True) -> ForwardTrace:
    dims = params.dims
    n = x_agent.shape[0] if x_agent.ndim == 2 else -1
    _check("q_text", np.asarray(q_text), (dims.text_dim,))
    if patches.ndim != 2 or patches.shape[1] != dims.image_dim or patches.shape[0] < 1:
        raise ShapeError(f"patches: shape {patches.shape}, expected (P, {dims.image_dim})")
    if n < 1:
        raise ShapeError(f"x_agent: expected 2-D, got shape {x_agent.shape}")
    _check("x_agent", x_agent, (n, dims.text_dim))
    bias = role_bias(role_pairs, n)

    leaves = _Leaves(params, requires_grad)
    v, img = encode_query(ag.constant(np.asarray(q_text)[None, :]), ag.constant(patches), leaves)
    h0 = project_nodes(ag.constant(x_agent), leaves)
    h1, gates, gated = selective_image_attention(h0, v, img, leaves)
    vs, hs = [v.data[0]], []
    h = h1
    for layer in range(dims.layers):
        h = gtl_layer(h, bias, leaves, layer)
        v, h = grnl_layer(v, h, leaves, layer)
        vs.append(v.data[0])
        hs.append(h.data)
    raw, norm = edge_logits(h, leaves)
    return ForwardTrace(vs, h0.data, h1.data, hs, gates.data, gated.data,
                        raw.data, norm.data, params, leaves, norm)


def backward(trace: ForwardTrace, upstream: np.ndarray, candidate_mask: np.ndarray,
             params: MmgtParams | None = None) -> dict[str, np.ndarray]:
    """Gradients of sum(upstream * logits) over candidate pairs w.r.t. every parameter.

    Entries outside ``candidate_mask`` (and the diagonal) are dropped before the
    reverse pass, so non-candidate pairs contribute nothing.
    """
    if params is not None and params is not trace.params:
        raise ValueError("trace was produced with different parameters")
    n = trace.logits.shape[0]
    if upstream.shape != (n, n) or candidate_mask.shape != (n, n):
        raise ShapeError(f"upstream/mask must be {n}x{n}")
    if not trace._out.requires_grad:
        raise ValueError("trace was produced without gradient tracking")
    seed = np.where(candidate_mask, upstream, 0.0)
    np.fill_diagonal(seed, 0.0)
    ag.backward(trace._out, seed)
    return {name: (leaf.grad.copy() if leaf.grad is not None else np.zeros_like(leaf.data))
            for name, leaf in trace._leaves.t.items()}
