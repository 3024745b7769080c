"""Skill bank: storage, retrieval, outcome accounting and failure buffers."""
from __future__ import annotations

import json
import threading
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from .answers import normalize_answer
from .embedding import EmbeddingCache, StaleCacheError

DEFAULT_CAPACITY = 16


class BankFormatError(ValueError):
    """A persisted bank failed to parse or violates an invariant."""


class UnknownSkillError(KeyError):
    pass


@dataclass(frozen=True)
class FailureRecord:
    question: str
    image_ref: str
    predicted: str
    gold: str
    lesson: str

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "image_ref": self.image_ref,
            "predicted": self.predicted,
            "gold": self.gold,
            "lesson": self.lesson,
        }


@dataclass
class Skill:
    id: int
    trigger: str
    strategy: str
    n_succ: int = 0
    n_use: int = 0
    version: int = 1
    failures: deque = field(default_factory=deque)

    @property
    def accuracy(self) -> float:
        """Running accuracy n_succ / n_use (0 before first use)."""
        return self.n_succ / self.n_use if self.n_use else 0.0

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "trigger": self.trigger,
            "strategy": self.strategy,
            "n_succ": self.n_succ,
            "n_use": self.n_use,
            "version": self.version,
            "failures": [f.to_dict() for f in self.failures],
        }


class SkillBank:
    """Skills keyed by id, iterated in ascending id order.

    ``revision`` increases on every change to skill text (add or modify);
    an :class:`EmbeddingCache` built at an older revision reports itself stale.
    Mutators take ``lock``; readers holding no lock may run concurrently.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY) -> None:
        if capacity < 1:
            raise ValueError("failure buffer capacity must be >= 1")
        self.capacity = capacity
        self._skills: dict[int, Skill] = {}
        self._next_id = 0
        self.revision = 0
        self.lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._skills)

    def __iter__(self) -> Iterator[Skill]:
        return iter(sorted(self._skills.values(), key=lambda s: s.id))

    def __contains__(self, skill_id: int) -> bool:
        return skill_id in self._skills

    def __getitem__(self, skill_id: int) -> Skill:
        try:
            return self._skills[skill_id]
        except KeyError:
            raise UnknownSkillError(skill_id) from None

    @property
    def ids(self) -> list[int]:
        return sorted(self._skills)

    def add_skill(self, trigger: str, strategy: str) -> int:
        if not trigger or not strategy:
            raise ValueError("trigger and strategy must be non-empty")
        with self.lock:
            sid = self._next_id
            self._skills[sid] = Skill(sid, trigger, strategy, failures=deque(maxlen=self.capacity))
            self._next_id += 1
            self.revision += 1
        return sid

    def modify_skill(self, skill_id: int, trigger: str, strategy: str) -> Skill:
        """Rewrite a skill in place: bump version, clear failures, keep counters."""
        if not trigger or not strategy:
            raise ValueError("trigger and strategy must be non-empty")
        with self.lock:
            skill = self[skill_id]
            skill.trigger = trigger
            skill.strategy = strategy
            skill.version += 1
            skill.failures.clear()
            self.revision += 1
        return skill

    def record_outcome(self, skill_id: int, correct: bool) -> float:
        with self.lock:
            skill = self[skill_id]
            skill.n_use += 1
            if correct:
                skill.n_succ += 1
        return skill.accuracy

    def push_failure(self, skill_id: int, record: FailureRecord) -> None:
        if normalize_answer(record.predicted) == normalize_answer(record.gold):
            raise ValueError("failure records require predicted != gold")
        with self.lock:
            # deque(maxlen=capacity) evicts the oldest record on overflow
            self[skill_id].failures.append(record)

    def hard_skills(self, tau_f: int) -> set[int]:
        if tau_f < 1:
            raise ValueError("tau_f must be >= 1")
        return {s.id for s in self._skills.values() if len(s.failures) >= tau_f}

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {"skills": [s.to_dict() for s in self]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str, capacity: int = DEFAULT_CAPACITY) -> "SkillBank":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise BankFormatError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict) or not isinstance(doc.get("skills"), list):
            raise BankFormatError("top level: expected object with a 'skills' array")
        bank = cls(capacity)
        for k, raw in enumerate(doc["skills"]):
            skill = _parse_skill(raw, f"skills[{k}]", capacity)
            if skill.id in bank._skills:
                raise BankFormatError(f"skills[{k}].id: duplicate id {skill.id}")
            bank._skills[skill.id] = skill
        bank._next_id = max(bank._skills, default=-1) + 1
        return bank

    @classmethod
    def load(cls, path: str | Path, capacity: int = DEFAULT_CAPACITY) -> "SkillBank":
        return cls.loads(Path(path).read_text(encoding="utf-8"), capacity)

    def copy(self) -> "SkillBank":
        return SkillBank.loads(self.dumps(), self.capacity)


def _require(raw: dict, key: str, kind: type, where: str):
    if key not in raw:
        raise BankFormatError(f"{where}.{key}: missing")
    value = raw[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise BankFormatError(f"{where}.{key}: expected integer")
    if kind is str and not isinstance(value, str):
        raise BankFormatError(f"{where}.{key}: expected string")
    if kind is list and not isinstance(value, list):
        raise BankFormatError(f"{where}.{key}: expected array")
    return value


def _parse_skill(raw, where: str, capacity: int) -> Skill:
    if not isinstance(raw, dict):
        raise BankFormatError(f"{where}: expected object")
    sid = _require(raw, "id", int, where)
    trigger = _require(raw, "trigger", str, where)
    strategy = _require(raw, "strategy", str, where)
    n_succ = _require(raw, "n_succ", int, where)
    n_use = _require(raw, "n_use", int, where)
    version = _require(raw, "version", int, where)
    failures = _require(raw, "failures", list, where)
    if sid < 0:
        raise BankFormatError(f"{where}.id: must be non-negative")
    if not trigger or not strategy:
        raise BankFormatError(f"{where}: trigger and strategy must be non-empty")
    if n_succ < 0 or n_use < 0:
        raise BankFormatError(f"{where}: counters must be non-negative")
    if n_succ > n_use:
        raise BankFormatError(f"{where}.n_succ: {n_succ} exceeds n_use {n_use}")
    if version < 1:
        raise BankFormatError(f"{where}.version: must be >= 1")
    if len(failures) > capacity:
        raise BankFormatError(f"{where}.failures: {len(failures)} records exceed capacity {capacity}")
    records = deque(maxlen=capacity)
    for k, fr in enumerate(failures):
        fwhere = f"{where}.failures[{k}]"
        if not isinstance(fr, dict):
            raise BankFormatError(f"{fwhere}: expected object")
        rec = FailureRecord(*(_require(fr, key, str, fwhere) for key in
                              ("question", "image_ref", "predicted", "gold", "lesson")))
        if normalize_answer(rec.predicted) == normalize_answer(rec.gold):
            raise BankFormatError(f"{fwhere}: predicted equals gold")
        records.append(rec)
    return Skill(sid, trigger, strategy, n_succ, n_use, version, records)


TIE_DECIMALS = 12


def retrieve_top_n(query_embedding: np.ndarray, n: int, cache: EmbeddingCache) -> list[int]:
    """Rank skills by cosine similarity to the query; ties go to the lower id.

    Cosines are compared at 12 decimals so equal texts tie regardless of
    summation order.

    Rank k is the skill assigned to agent k.
    """
    if cache.stale:
        raise StaleCacheError("embedding cache is stale; rebuild before retrieval")
    if n > len(cache.skill_ids):
        raise ValueError(f"requested {n} skills but the bank holds {len(cache.skill_ids)}")
    q_norm = np.linalg.norm(query_embedding)
    row_norms = np.linalg.norm(cache.matrix, axis=1)
    dots = cache.matrix @ query_embedding
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where((row_norms > 0) & (q_norm > 0), dots / (row_norms * q_norm), 0.0)
    cos = np.round(cos, TIE_DECIMALS)
    order = sorted(range(len(cache.skill_ids)), key=lambda k: (-cos[k], cache.skill_ids[k]))
    return [cache.skill_ids[k] for k in order[:n]]


def seed_bank(capacity: int = DEFAULT_CAPACITY) -> SkillBank:
    text = resources.files("skilltopo.data").joinpath("seed_skills.json").read_text(encoding="utf-8")
    return SkillBank.loads(text, capacity)
