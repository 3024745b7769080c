"""Command-line entry point: ``skilltopo <subcommand>``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck, mmgt, topology
from .designer import ChatDesigner, MockDesigner, evolve
from .embedding import EmbeddingCache, HashingEmbedder, HttpEmbedder
from .executor import ChatAgentBackend, MockAgentBackend
from .llm import ChatClient
from .mmgt import MmgtParams, read_patch_file
from .rng import stream
from .skill_bank import BankFormatError, SkillBank, retrieve_top_n, seed_bank
from .tasks import generate_tasks, load_task_set
from .trainer import ConfigError, TrainConfig, TrainingAborted, evaluate, run

log = logging.getLogger("skilltopo")

EXIT_OK, EXIT_RUN_FAILURE, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    """Bad flags or unreadable inputs: exit code 2."""


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_manifest(out: Path, command: str, config: dict, seed: int, started: float,
                   extra: dict | None = None) -> Path:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "git_describe": _git_describe(),
        "wall_time_s": round(time.perf_counter() - started, 3),
    }
    manifest.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


ADAPTER_SECTIONS = ("agent", "designer", "embedder")


def load_config(path: str | None) -> tuple[TrainConfig, dict]:
    """Split a config file into training fields and adapter sections (agent/designer/embedder)."""
    if path is None:
        return TrainConfig(), {}
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    adapters = {k: raw.pop(k) for k in ADAPTER_SECTIONS if k in raw}
    for name, section in adapters.items():
        if not isinstance(section, dict):
            raise ConfigError(f"{path}: '{name}' must be an object")
    return TrainConfig.from_dict(raw), adapters


def _backends(args, adapters: dict | None = None):
    agent_cfg = (adapters or {}).get("agent", {})
    designer_cfg = (adapters or {}).get("designer", agent_cfg)
    backend = args.backend or ("chat" if agent_cfg.get("endpoint") else "mock")
    if backend == "mock":
        return MockAgentBackend(), MockDesigner()
    endpoint = args.endpoint or agent_cfg.get("endpoint")
    if not endpoint:
        raise UsageError("chat backend needs --endpoint or agent.endpoint in the config")
    model = args.model or agent_cfg.get("model", "default")
    agent = ChatAgentBackend(ChatClient(endpoint, model))
    designer = ChatDesigner(ChatClient(designer_cfg.get("endpoint", endpoint),
                                       designer_cfg.get("model", model)))
    return agent, designer


def _load_bank(path: str | None, capacity: int = 16) -> SkillBank:
    if path is None:
        return seed_bank(capacity)
    try:
        return SkillBank.load(path, capacity)
    except OSError as exc:
        raise UsageError(f"cannot read bank: {exc}") from None
    except BankFormatError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_checkpoint(path: str) -> tuple[MmgtParams, SkillBank, TrainConfig]:
    ckpt = Path(path)
    cfg_path = ckpt / "config.json"
    config = TrainConfig.load(cfg_path) if cfg_path.exists() else TrainConfig()
    try:
        params = MmgtParams.load(ckpt / "params.mmgt")
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint params: {exc}") from None
    return params, _load_bank(str(ckpt / "bank.json"), config.capacity), config


def cmd_train(args) -> int:
    started = time.perf_counter()
    config, adapters = load_config(args.config)
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out = Path(args.out)
    bank = _load_bank(args.bank, config.capacity)
    tasks = None
    if config.tasks_path:
        try:
            tasks = load_task_set(config.tasks_path)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    agent, designer = _backends(args, adapters)
    embedder = None
    if "endpoint" in adapters.get("embedder", {}):
        embedder = HttpEmbedder(adapters["embedder"]["endpoint"], config.text_dim)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    result = run(config, bank, agent, designer, tasks=tasks, out_dir=out, embedder=embedder,
                 resume_from=args.resume)
    last = result.log[-1] if result.log else {}
    write_manifest(out, "train", config.to_dict(), config.seed, started,
                   {"iterations": config.iterations, "final_bank_size": len(result.bank)})
    print(f"trained {config.iterations} iterations; last mean reward "
          f"{last.get('mean_reward', float('nan')):.3f}; bank size {len(result.bank)}; output in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    params, bank, config = _load_checkpoint(args.checkpoint)
    mode = args.mode or config.mode
    prior = topology.candidate_edges(mode, config.n_agents, config.density, config.seed)
    if args.tasks:
        try:
            tasks = load_task_set(args.tasks)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    else:
        tasks = generate_tasks(args.seed + 1, 64, config.categories, config.num_patches,
                               config.image_dim)
    agent, _ = _backends(args)
    acc = evaluate(params, bank, tasks, prior, agent, args.seed)
    print(json.dumps({"accuracy": acc, "tasks": len(tasks), "mode": prior.mode.value}))
    if args.out:
        write_manifest(Path(args.out), "eval", {**config.to_dict(), "mode": prior.mode.value},
                       args.seed, started, {"accuracy": acc})
    return EXIT_OK


def cmd_evolve_once(args) -> int:
    started = time.perf_counter()
    bank = _load_bank(args.bank)
    _, designer = _backends(args)
    actions = evolve(bank, args.tau_f, designer)
    for a in actions:
        target = a.target if a.kind == "Modify" else a.created_id
        print(f"{a.kind}\t{target}\t{a.trigger}")
    dest = Path(args.out_bank or args.bank) if (args.out_bank or args.bank) else None
    if dest is not None:
        bank.save(dest)
        write_manifest(dest.parent, "evolve-once", {"tau_f": args.tau_f}, 0, started,
                       {"actions": len(actions)})
    print(f"{len(actions)} action(s) applied")
    return EXIT_OK


def cmd_inspect_bank(args) -> int:
    bank = _load_bank(args.bank)
    print(f"{'id':>3}  {'pi':>6}  {'n_use':>5}  {'ver':>3}  {'|F|':>3}  trigger")
    for s in bank:
        print(f"{s.id:>3}  {s.accuracy:>6.3f}  {s.n_use:>5}  {s.version:>3}  {len(s.failures):>3}  {s.trigger}")
    return EXIT_OK


def cmd_export_graph(args) -> int:
    params, bank, config = _load_checkpoint(args.checkpoint)
    mode = args.mode or config.mode
    prior = topology.candidate_edges(mode, config.n_agents, config.density, config.seed)
    embedder = HashingEmbedder(params.dims.text_dim)
    cache = EmbeddingCache(bank, embedder).rebuild()
    if args.patches:
        try:
            patches = read_patch_file(args.patches)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    else:
        patches = np.zeros((config.num_patches, params.dims.image_dim))
    q = embedder.embed(args.query)
    ids = retrieve_top_n(q, prior.n, cache)
    trace = mmgt.forward(q, patches, cache.rows(ids), prior.role_pairs, params, requires_grad=False)
    graph = topology.sample_graph(trace.logits, prior, stream(args.seed, 0x60F))
    sys.stdout.write(topology.to_dot(graph))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = gradcheck.run_suite(range(args.seeds))
    failed = [p for p in report.probes if not p.ok]
    for p in failed[:20]:
        print(f"FAIL seed={p.seed} {p.loss} {p.tensor} {p.kind}: analytic={p.analytic:.6e} "
              f"numeric={p.numeric:.6e} rel={p.rel_err:.2e}")
    worst = report.worst()
    print(f"{len(report.probes) - len(failed)}/{len(report.probes)} probes passed in "
          f"{report.seconds:.1f}s; worst rel err {worst.rel_err:.2e} ({worst.tensor})")
    return EXIT_OK if report.ok else EXIT_RUN_FAILURE


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(bank=_load_bank(args.bank), checkpoint=args.checkpoint)
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skilltopo")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def backend_flags(p):
        p.add_argument("--backend", choices=("mock", "chat"),
                       help="agent/designer backend (default: chat if the config names an endpoint)")
        p.add_argument("--endpoint", help="chat-completions URL for --backend chat")
        p.add_argument("--model")

    p = sub.add_parser("train", help="train the topology model and evolve skills")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run")
    p.add_argument("--bank", help="initial skill bank (default: bundled seed bank)")
    p.add_argument("--resume", help="checkpoint directory to resume from")
    backend_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a task set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", help="tasks.jsonl (default: fresh synthetic tasks)")
    p.add_argument("--mode", help="topology mode override")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for the manifest")
    backend_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("evolve-once", help="run one evolution round on a bank file")
    p.add_argument("--bank")
    p.add_argument("--tau-f", type=int, default=3)
    p.add_argument("--out-bank", help="write the evolved bank here instead of in place")
    backend_flags(p)
    p.set_defaults(func=cmd_evolve_once)

    p = sub.add_parser("inspect-bank", help="list skills with accuracy, version and buffer size")
    p.add_argument("--bank")
    p.set_defaults(func=cmd_inspect_bank)

    p = sub.add_parser("export-graph", help="sample one topology for a query as DOT")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--patches", help="patch-feature file")
    p.add_argument("--mode")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_export_graph)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--bank")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic, not a traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE


if __name__ == "__main__":
    sys.exit(main())
