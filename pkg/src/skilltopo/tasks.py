"""Queries, synthetic benchmark tasks and JSONL task datasets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mmgt import read_patch_file, write_patch_file
from .rng import stream

DEFAULT_CATEGORIES = ("counting", "ocr", "spatial", "chart")


@dataclass(frozen=True)
class Query:
    id: str
    question: str
    patches: np.ndarray          # P x D_img
    gold: str | None = None
    category: str | None = None
    image_ref: str = ""


_QUESTION_TEMPLATES = (
    "Looking at the image, answer this {tag} question: what is shown in region {k}?",
    "A {tag} question about the picture: what does item {k} indicate?",
    "Use the image to solve this {tag} problem, case {k}.",
)

# the planted patch row gets this offset added, far above the noise scale
_SIGNAL = 4.0


def category_from_patches(patches: np.ndarray, categories: Sequence[str]) -> str:
    """Recover the planted category: index of the patch with the largest row mean."""
    return categories[int(np.argmax(patches.mean(axis=1)))]


def gold_for(category: str) -> str:
    return f"{category} answer"


def generate_tasks(seed: int, count: int, categories: Sequence[str] = DEFAULT_CATEGORIES,
                   num_patches: int = 16, image_dim: int = 32) -> list[Query]:
    """Deterministic synthetic tasks, categories assigned round-robin.

    Category ``c`` is planted by lifting patch row ``c`` so it has the largest
    row mean; the gold answer is a function of that category only.
    """
    if count < 1 or not categories:
        raise ValueError("need count >= 1 and at least one category")
    if num_patches < len(categories):
        raise ValueError("need at least one patch per category to plant the signal")
    tasks = []
    for k in range(count):
        c = k % len(categories)
        tag = categories[c]
        rng = stream(seed, k, 0x7A5C)
        patches = rng.normal(0.0, 0.5, size=(num_patches, image_dim))
        patches[c] += _SIGNAL
        template = _QUESTION_TEMPLATES[k % len(_QUESTION_TEMPLATES)]
        # float32 round trip so in-memory tasks match what a patch file stores
        patches = patches.astype(np.float32).astype(np.float64)
        tasks.append(Query(id=f"syn-{seed}-{k}", question=template.format(tag=tag, k=k),
                           patches=patches, gold=gold_for(tag), category=tag,
                           image_ref=f"synthetic://{seed}/{k}"))
    return tasks


def write_task_set(tasks: Sequence[Query], directory: str | Path) -> Path:
    """Write ``tasks.jsonl`` plus one patch file per task; returns the JSONL path."""
    directory = Path(directory)
    (directory / "patches").mkdir(parents=True, exist_ok=True)
    lines = []
    for q in tasks:
        rel = Path("patches") / f"{q.id}.bin"
        write_patch_file(directory / rel, q.patches)
        row = {"id": q.id, "question": q.question, "patches": str(rel), "gold": q.gold}
        if q.category is not None:
            row["category"] = q.category
        lines.append(json.dumps(row, ensure_ascii=False))
    path = directory / "tasks.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_task_set(path: str | Path) -> list[Query]:
    """Read a JSONL dataset of {question, patches, gold[, id, category]}.

    Patch paths are resolved relative to the JSONL file.
    """
    path = Path(path)
    tasks = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            patch_path = path.parent / row["patches"]
            tasks.append(Query(id=str(row.get("id", f"{path.stem}-{lineno}")),
                               question=row["question"],
                               patches=read_patch_file(patch_path),
                               gold=row.get("gold"),
                               category=row.get("category"),
                               image_ref=str(row["patches"])))
        except (KeyError, json.JSONDecodeError, ValueError, OSError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not tasks:
        raise ValueError(f"{path}: no tasks")
    return tasks
