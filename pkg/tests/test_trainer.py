import json

import numpy as np
import pytest

from skilltopo import mmgt, topology
from skilltopo.designer import MockDesigner
from skilltopo.embedding import HashingEmbedder, rebuild_cache
from skilltopo.executor import MockAgentBackend
from skilltopo.mmgt import MmgtParams, ModelDims
from skilltopo.rng import derive_seed, stream
from skilltopo.skill_bank import FailureRecord, SkillBank, seed_bank
from skilltopo.tasks import generate_tasks
from skilltopo.trainer import (Adam, ConfigError, TrainConfig, TrainingAborted, evaluate, infer,
                               policy_gradient, run, train_step)

TINY = dict(n_agents=3, text_dim=32, image_dim=8, hidden=8, num_patches=4, layers=1,
            batch_size=4, train_tasks=32, checkpoint_every=5)


def tiny(**kw):
    return TrainConfig(**{**TINY, **kw})


def test_config_defaults_match_desk_scale():
    c = TrainConfig()
    assert (c.n_agents, c.hidden, c.layers, c.text_dim, c.image_dim, c.num_patches) == (4, 64, 2, 384, 32, 16)
    assert (c.iterations, c.batch_size, c.evolve_period, c.tau_f, c.mode) == (300, 8, 10, 3, "Complete")


@pytest.mark.parametrize("bad", [{"iterations": 0}, {"learning_rate": 0}, {"mode": "Mesh"},
                                 {"n_agents": 1}, {"unknown": 1}, {"batch_size": True}])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict(bad)


def test_config_file_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(tiny(seed=4).to_dict()))
    assert TrainConfig.load(path) == tiny(seed=4)
    path.write_text("[1]")
    with pytest.raises(ConfigError):
        TrainConfig.load(path)


def _params(dims=ModelDims(16, 4, 8, 1)):
    return MmgtParams.init(dims, stream(0))


def test_adam_zero_gradient():
    params = _params()
    opt = Adam(1e-2)
    new = opt.update(params, {n: np.zeros_like(t) for n, t in params.tensors.items()})
    assert new.digest() == params.digest() and opt.step_count == 1


def test_adam_constant_gradient_step_approaches_lr():
    params = _params()
    opt = Adam(1e-2)
    g = {n: np.full_like(t, 0.3) for n, t in params.tensors.items()}
    for _ in range(200):
        prev = params
        params = opt.update(params, g)
    step = prev["edge.W_edge"] - params["edge.W_edge"]
    np.testing.assert_allclose(step, 1e-2, rtol=1e-4)


def test_adam_first_step_matches_closed_form():
    params = _params()
    opt = Adam(0.1)
    g = {n: np.random.default_rng(0).normal(size=t.shape) for n, t in params.tensors.items()}
    new = opt.update(params, g)
    # bias-corrected first step is lr * g / (|g| + eps)
    for name in params.names():
        expected = params[name] - 0.1 * g[name] / (np.abs(g[name]) + 1e-8)
        np.testing.assert_allclose(new[name], expected, rtol=1e-12, atol=1e-15)


def _items(params, prior, n=3, seed=0):
    from types import SimpleNamespace
    dims = params.dims
    rng = np.random.default_rng(seed)
    items = []
    for b in range(n):
        q = rng.normal(size=dims.text_dim)
        x = rng.normal(size=(prior.n, dims.text_dim))
        trace = mmgt.forward(q, rng.normal(size=(3, dims.image_dim)), x, prior.role_pairs, params)
        items.append(SimpleNamespace(trace=trace, topology=topology.sample_graph(trace.logits, prior, stream(seed, b))))
    return items


def test_zero_rewards_zero_loss_and_gradients():
    params = _params()
    prior = topology.candidate_edges("Complete", 3)
    loss, grads, _ = policy_gradient(params, _items(params, prior), [0.0, 0.0, 0.0], prior)
    assert loss == 0.0 and all(not g.any() for g in grads.values())


def test_single_edge_reward_increases_probability():
    dims = ModelDims(16, 4, 8, 1)
    params = _params(dims).replace(edge__W_edge=np.zeros((8, 8)), edge__b=np.array(0.0))
    prior = topology.candidate_edges("Linear", 2)
    rng = np.random.default_rng(0)
    q, patches, x = rng.normal(size=16), rng.normal(size=(3, 4)), rng.normal(size=(2, 16))
    trace = mmgt.forward(q, patches, x, prior.role_pairs, params)
    assert trace.logits[0, 1] == 0.0
    graph = next(g for s in range(50)
                 if (0, 1) in (g := topology.sample_graph(trace.logits, prior, stream(s))).edges)
    from types import SimpleNamespace
    _, grads, _ = policy_gradient(params, [SimpleNamespace(trace=trace, topology=graph)], [1.0], prior)
    new = Adam(1e-2).update(params, grads)
    after = mmgt.forward(q, patches, x, prior.role_pairs, new, requires_grad=False)
    assert after.logits[0, 1] > trace.logits[0, 1]


def _bank():
    bank = SkillBank()
    for t in ("counting objects", "ocr reading", "general visual question answering",
              "step by step visual reasoning"):
        bank.add_skill(t, "strategy")
    return bank


def test_evolution_schedule():
    res = run(tiny(iterations=25, evolve_period=10), _bank(), MockAgentBackend(), MockDesigner())
    assert [t for t, _ in res.evolution_rounds] == [10, 20]
    assert [e["evolved"] for e in res.log].count(True) == 2


def test_single_iteration_single_round():
    bank = _bank()
    for k in range(3):
        bank.push_failure(2, FailureRecord(f"q{k}", "i", "UNKNOWN", "chart answer", "missing category: chart"))
    res = run(tiny(iterations=1, evolve_period=1, tau_f=3), bank, MockAgentBackend(), MockDesigner())
    assert len(res.evolution_rounds) == 1 and res.evolution_rounds[0][1]


def test_evolution_disabled():
    res = run(tiny(iterations=20, evolve=False), _bank(), MockAgentBackend(), MockDesigner())
    assert res.evolution_rounds == [] and len(res.bank) == 4


def test_log_fields(tmp_path):
    run(tiny(iterations=3), _bank(), MockAgentBackend(), MockDesigner(), out_dir=tmp_path)
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["t"] for r in rows] == [1, 2, 3]
    assert set(rows[0]) >= {"t", "loss", "mean_reward", "edges_mean", "bank_size", "evolved"}


def test_bank_smaller_than_roster_rejected():
    bank = SkillBank()
    bank.add_skill("only", "one")
    with pytest.raises(ConfigError):
        run(tiny(), bank, MockAgentBackend(), MockDesigner())


def test_resume_is_bit_identical(tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    run(tiny(iterations=10), _bank(), MockAgentBackend(), MockDesigner(), out_dir=full)
    run(tiny(iterations=5), _bank(), MockAgentBackend(), MockDesigner(), out_dir=part)
    run(tiny(iterations=10), _bank(), MockAgentBackend(), MockDesigner(), out_dir=part, resume_from=part)
    assert (full / "params.mmgt").read_bytes() == (part / "params.mmgt").read_bytes()
    assert (full / "bank.json").read_bytes() == (part / "bank.json").read_bytes()
    assert (full / "log.jsonl").read_text() == (part / "log.jsonl").read_text()


class DownBackend:
    def respond(self, call):
        raise ConnectionError("unreachable")


def test_persistent_backend_failure_aborts_with_checkpoint(tmp_path):
    with pytest.raises(TrainingAborted):
        run(tiny(iterations=5), _bank(), DownBackend(), MockDesigner(), out_dir=tmp_path)
    state = json.loads((tmp_path / "state.json").read_text())
    assert state["t"] == 0 and (tmp_path / "params.mmgt").exists()


def test_failed_queries_not_credited():
    cfg = tiny()
    bank = _bank()
    cache = rebuild_cache(bank, HashingEmbedder(cfg.text_dim))
    tasks = generate_tasks(0, 4, num_patches=4, image_dim=8)
    params = MmgtParams.init(cfg.dims, stream(0))
    step = train_step(tasks, params, bank, cache, cfg.prior(), DownBackend(), MockDesigner(),
                      [derive_seed(0, b) for b in range(4)])
    assert all(s.n_use == 0 for s in bank)
    assert step.rewards == [0.0] * 4


def test_outcomes_attributed_to_every_participant():
    cfg = tiny()
    bank = _bank()
    cache = rebuild_cache(bank, HashingEmbedder(cfg.text_dim))
    task = generate_tasks(0, 1, num_patches=4, image_dim=8)[0]
    params = MmgtParams.init(cfg.dims, stream(0))
    step = train_step([task], params, bank, cache, cfg.prior(), MockAgentBackend(), MockDesigner(), [7])
    used = step.items[0].skill_ids
    for s in bank:
        assert s.n_use == (1 if s.id in used else 0)
        if s.id in used and not step.rewards[0]:
            assert s.failures[-1].lesson == f"missing category: {task.category}"


def test_evaluate_does_not_mutate_bank():
    cfg = tiny()
    bank = seed_bank()
    before = bank.dumps()
    params = MmgtParams.init(cfg.dims, stream(0))
    tasks = generate_tasks(1, 8, num_patches=4, image_dim=8)
    a = evaluate(params, bank, tasks, cfg.prior(), MockAgentBackend(), seed=3)
    b = evaluate(params, bank, tasks, cfg.prior(), MockAgentBackend(), seed=3)
    assert a == b and 0.0 <= a <= 1.0
    assert bank.dumps() == before
