from collections import Counter

import numpy as np
import pytest

from skilltopo.tasks import (category_from_patches, generate_tasks, gold_for, load_task_set,
                             write_task_set)


def test_same_seed_same_tasks():
    a, b = generate_tasks(5, 12), generate_tasks(5, 12)
    assert [t.question for t in a] == [t.question for t in b]
    assert all(np.array_equal(x.patches, y.patches) for x, y in zip(a, b))


def test_round_robin():
    tasks = generate_tasks(0, 10, ("ocr", "chart"), num_patches=4, image_dim=3)
    assert Counter(t.category for t in tasks) == {"ocr": 5, "chart": 5}
    assert all(t.category in t.question.split() for t in tasks)


def test_gold_recomputed_from_patch_files(tmp_path):
    cats = ("counting", "ocr", "spatial", "chart")
    tasks = generate_tasks(3, 40, cats, num_patches=6, image_dim=5)
    path = write_task_set(tasks, tmp_path)
    loaded = load_task_set(path)
    for orig, back in zip(tasks, loaded):
        assert np.array_equal(orig.patches, back.patches)
        assert gold_for(category_from_patches(back.patches, cats)) == back.gold == orig.gold


def test_load_errors(tmp_path):
    bad = tmp_path / "tasks.jsonl"
    bad.write_text('{"question": "q"}\n')
    with pytest.raises(ValueError, match="tasks.jsonl:1"):
        load_task_set(bad)


def test_generate_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_tasks(0, 0)
    with pytest.raises(ValueError):
        generate_tasks(0, 4, ("a", "b", "c"), num_patches=2)
