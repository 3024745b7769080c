"""Text embeddings, skill node features and the skill embedding cache."""
from __future__ import annotations

import re
from typing import TYPE_CHECKING, Protocol, Sequence

import numpy as np

if TYPE_CHECKING:
    from .skill_bank import Skill, SkillBank

DEFAULT_DIM = 384

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_ASCII_WS = re.compile(r"[ \t\n\r\f\v]+")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return [t for t in _ASCII_WS.split(text) if t]


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature hashing over whitespace tokens, L2-normalized.

    Each token adds +1 or -1 (top bit of its FNV-1a hash) at index ``hash % dim``.
    Empty text maps to the zero vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM) -> None:
        if dim < 1:
            raise ValueError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            h = fnv1a_64(token.encode("utf-8"))
            vec[h % self.dim] += -1.0 if h >> 63 else 1.0
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec


class HttpEmbedder:
    """Client for a remote sentence encoder.

    POSTs ``{"texts": [...]}`` and expects a JSON list of row vectors back
    (optionally wrapped as ``{"embeddings": [...]}``).
    """

    def __init__(self, endpoint: str, dim: int, timeout: float = 30.0) -> None:
        self.endpoint = endpoint
        self.dim = dim
        self.timeout = timeout

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        import httpx

        resp = httpx.post(self.endpoint, json={"texts": list(texts)}, timeout=self.timeout)
        resp.raise_for_status()
        body = resp.json()
        rows = body["embeddings"] if isinstance(body, dict) else body
        out = np.asarray(rows, dtype=np.float64).reshape(len(texts), -1)
        if out.shape[1] != self.dim:
            raise ValueError(f"encoder returned dim {out.shape[1]}, expected {self.dim}")
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def skill_text(trigger: str, strategy: str) -> str:
    return trigger + " " + strategy


def node_feature(skill: "Skill", embedder: Embedder) -> np.ndarray:
    return embedder.embed(skill_text(skill.trigger, skill.strategy))


class EmbeddingCache:
    """Row-per-skill embedding matrix, ordered by skill id.

    The cache is stale whenever the bank's text revision has moved past the
    revision it was built from; the bank bumps its revision on every trigger
    or strategy change and on every added skill.
    """

    def __init__(self, bank: "SkillBank", embedder: Embedder) -> None:
        self.bank = bank
        self.embedder = embedder
        self.matrix = np.zeros((0, embedder.dim))
        self.skill_ids: list[int] = []
        self._revision = -1

    @property
    def stale(self) -> bool:
        return self._revision != self.bank.revision

    def rebuild(self) -> "EmbeddingCache":
        skills = list(self.bank)
        self.skill_ids = [s.id for s in skills]
        if skills:
            self.matrix = np.stack([node_feature(s, self.embedder) for s in skills])
        else:
            self.matrix = np.zeros((0, self.embedder.dim))
        self._revision = self.bank.revision
        return self

    def rows(self, skill_ids: Sequence[int]) -> np.ndarray:
        """Feature rows for ``skill_ids`` in the given order (the agent matrix)."""
        if self.stale:
            raise StaleCacheError("embedding cache is stale; rebuild before reading")
        index = {sid: k for k, sid in enumerate(self.skill_ids)}
        return self.matrix[[index[s] for s in skill_ids]]


class StaleCacheError(RuntimeError):
    pass


def rebuild_cache(bank: "SkillBank", embedder: Embedder) -> EmbeddingCache:
    return EmbeddingCache(bank, embedder).rebuild()
