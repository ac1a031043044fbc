"""Command-line entry point: ``python -m rfs <subcommand> --config FILE``.

Each subcommand creates ``<output_dir>/<run_id>/`` holding the resolved
config, ``metrics.csv``, any checkpoints and ``summary.json``; wall-clock
time goes to ``timing.json`` so that the other files are reproducible byte
for byte. Failures print one JSON object ``{"error": ..., "message": ...}``
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from ..flowpolicy import DemoSet, VelocityField
from ..rl_offline import OfflineDataset
from ..rl_online import make_policy
from ..rollout import evaluate_base, evaluate_policy
from ..seeding import substream
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .pipeline import (collect, evaluate_field, fit_field, make_demos, metric_row, new_run_dir, output_root,
                       run_offline, run_online, schedule_for, write_json, write_metrics)
from .repro import run_repro

SUBCOMMANDS = ("gen-demos", "train-fm", "train-online", "collect-offline", "train-offline", "eval", "repro")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rfs", description="Residual flow steering experiments")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    helps = {
        "gen-demos": "roll the scripted expert and write demos.jsonl",
        "train-fm": "fit the flow-matching base policy",
        "train-online": "fine-tune a modulation policy with PPO",
        "collect-offline": "record corrected rollouts of the base policy",
        "train-offline": "TD3+BC on a corrected-rollout dataset",
        "eval": "evaluate a base field and optional modulation policy",
        "repro": "full methods x envs x seeds table",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config's seed")
        p.add_argument("--method", choices=("rfs", "dsrl", "residual"), help="override the config's method")
        p.add_argument("--critic", choices=("residual", "concat", "executed"), help="override the critic variant")
        p.add_argument("--output-dir", help="run root (else config output_dir, else $RFS_OUTPUT_DIR)")
        if name in ("train-fm",):
            p.add_argument("--demos", help="demos.jsonl to train on (generated when omitted)")
        if name in ("train-online", "collect-offline", "train-offline", "eval"):
            p.add_argument("--field", help="velocity_field checkpoint (trained from scratch when omitted)")
        if name == "train-offline":
            p.add_argument("--dataset", help="offline dataset (collected when omitted; needs --field)")
        if name == "eval":
            p.add_argument("--policy", help="modulation_policy checkpoint (fresh untrained policy when omitted)")
            p.add_argument("--base", action="store_true", help="evaluate the base field alone")
            p.add_argument("--greedy", action="store_true", help="use the policy's deterministic heads")
    return parser


def _base_field(cfg: ExperimentConfig, seed: int, run_dir: Path, field_path: str | None):
    """Load ``field_path`` or train a field from fresh demos; returns ``(field, fm metrics rows)``."""
    if field_path:
        return load_checkpoint(field_path, "velocity_field"), []
    demos = make_demos(cfg, seed)
    demos.save(run_dir / "demos.jsonl")
    field, rows = fit_field(cfg, demos, seed)
    save_checkpoint(run_dir / "velocity_field.rfsw", field)
    return field, rows


def _summary(final_success, episodes, seed, **extra) -> dict:
    return {"final_success": final_success, "episodes": episodes, "seeds": [seed], **extra}


def _run(args) -> int:
    cfg = load_config(args.config).with_overrides(args.seed, args.method, args.critic)
    seed = cfg.seed
    root = output_root(cfg, args.output_dir)
    run_dir = new_run_dir(root, cfg, args.command)
    start = time.perf_counter()
    cmd = args.command
    rows: list[dict] = []
    if cmd == "gen-demos":
        demos = make_demos(cfg, seed)
        demos.save(run_dir / "demos.jsonl")
        summary = _summary(None, cfg.fm.demo_episodes, seed, records=len(demos))
    elif cmd == "train-fm":
        demos = DemoSet.load(args.demos) if args.demos else make_demos(cfg, seed)
        if not args.demos:
            demos.save(run_dir / "demos.jsonl")
        field, rows = fit_field(cfg, demos, seed)
        save_checkpoint(run_dir / "velocity_field.rfsw", field)
        success = evaluate_field(cfg, field, seed)
        rows.append(metric_row(iteration=cfg.fm.steps, success_rate=success))
        summary = _summary(success, cfg.eval_episodes, seed, eval_mode="base")
    elif cmd == "train-online":
        field, rows = _base_field(cfg, seed, run_dir, args.field)
        res = run_online(cfg, field, seed)
        rows = rows + res.metrics
        save_checkpoint(run_dir / "modulation_policy.rfsw", res.best_policy)
        save_checkpoint(run_dir / "value_net.rfsw", res.value_net)
        if args.field:
            save_checkpoint(run_dir / "velocity_field.rfsw", field)
        summary = _summary(res.final_success, cfg.eval_episodes, seed, eval_mode="stochastic", method=cfg.method,
                           base_success=res.base_success, initial_success=res.initial_success)
    elif cmd == "collect-offline":
        field, rows = _base_field(cfg, seed, run_dir, args.field)
        ds = collect(cfg, field, seed)
        ds.save(run_dir / "dataset.jsonl")
        summary = _summary(ds.header["corrected_success"], cfg.offline_episodes, seed, records=len(ds),
                           eval_mode="corrected")
    elif cmd == "train-offline":
        if args.dataset and not args.field:
            raise UsageError("--dataset needs the --field it was collected with")
        field, rows = _base_field(cfg, seed, run_dir, args.field)
        if args.dataset:
            ds = OfflineDataset.load(args.dataset, field)
        else:
            ds = collect(cfg, field, seed)
            ds.save(run_dir / "dataset.jsonl")
        if args.field:
            save_checkpoint(run_dir / "velocity_field.rfsw", field)
        res = run_offline(cfg, ds, field, seed)
        rows = rows + res.metrics
        save_checkpoint(run_dir / "modulation_policy.rfsw", res.best_policy)
        save_checkpoint(run_dir / "critic_pair.rfsw", res.critics)
        summary = _summary(res.final_success, cfg.eval_episodes, seed, eval_mode="greedy",
                           critic=cfg.td3bc.critic_variant, dataset_success=ds.header.get("corrected_success"))
    elif cmd == "eval":
        if args.field:
            field = load_checkpoint(args.field, "velocity_field")
        else:
            field = VelocityField(2, cfg.env.obs_dim, cfg.fm.chunk_len, hidden=cfg.fm.hidden,
                                  action_scale=cfg.env.action_bound, rng=substream(seed, "fm-init"))
        schedule = schedule_for(cfg)
        if args.base:
            ev = evaluate_base(cfg.env, field, schedule, cfg.eval_episodes, seed, tag="final")
            mode = "base"
        else:
            if args.policy:
                policy = load_checkpoint(args.policy, "modulation_policy")
            else:
                policy = make_policy(cfg.env, field, cfg.method, cfg.ppo.hidden, seed)
            ev = evaluate_policy(cfg.env, policy, field, schedule, cfg.eval_episodes, seed, tag="final",
                                 deterministic=args.greedy)
            mode = "greedy" if args.greedy else "stochastic"
        rows = [metric_row(iteration=0, success_rate=ev.success_rate, mean_return=ev.mean_return)]
        summary = _summary(ev.success_rate, cfg.eval_episodes, seed, eval_mode=mode)
    else:  # repro
        result = run_repro(cfg, run_dir)
        write_json(run_dir / "timing.json", {"wall_time": time.perf_counter() - start})
        print(json.dumps({"run_dir": str(run_dir), "complete": result.complete}))
        return EXIT_OK if result.complete else EXIT_FAILURE
    write_metrics(run_dir / "metrics.csv", rows)
    write_json(run_dir / "summary.json", summary)
    write_json(run_dir / "timing.json", {"wall_time": time.perf_counter() - start})
    print(json.dumps({"run_dir": str(run_dir), "final_success": summary["final_success"]}))
    return EXIT_OK


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        return _run(args)
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except CheckpointError as e:
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)
    except FileNotFoundError as e:
        return _fail("file_not_found", str(e), EXIT_FAILURE)
    except (ValueError, FloatingPointError, RuntimeError) as e:
        return _fail(type(e).__name__, str(e), EXIT_FAILURE)
