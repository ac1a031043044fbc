"""Pipeline stages and run-directory bookkeeping.

Every stage takes an :class:`ExperimentConfig` and a root seed and draws all
of its randomness from named substreams of that seed.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import math
import os
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..envs import generate_demos
from ..flowpolicy import DemoSet, FMConfig, IntegrationSchedule, VelocityField, train_fm
from ..rl_offline import OfflineDataset, collect_offline, train_offline
from ..rl_online import train_online
from ..rollout import evaluate_base
from ..seeding import substream
from .config import ExperimentConfig

METRIC_COLUMNS = ("iteration", "env_steps", "success_rate", "mean_return", "policy_loss", "value_loss", "mean_ratio")


def schedule_for(cfg: ExperimentConfig) -> IntegrationSchedule:
    return IntegrationSchedule.uniform(cfg.fm.integration_steps)


def make_demos(cfg: ExperimentConfig, seed: int) -> DemoSet:
    return generate_demos(cfg.env, cfg.fm.demo_episodes, substream(seed, "demos"), chunk_len=cfg.fm.chunk_len)


def fit_field(cfg: ExperimentConfig, demos: DemoSet, seed: int) -> tuple[VelocityField, list[dict]]:
    """Train a fresh velocity field; returns it with one metrics row per ``log_every`` steps."""
    fm = cfg.fm
    if demos.actions.shape[1] != 2 * fm.chunk_len:
        raise ValueError(f"demos hold chunks of {demos.actions.shape[1] // 2}, config expects {fm.chunk_len}")
    field = VelocityField(2, cfg.env.obs_dim, fm.chunk_len, hidden=fm.hidden, action_scale=cfg.env.action_bound,
                          rng=substream(seed, "fm-init"))
    result = train_fm(field, demos, FMConfig(lr=fm.lr, batch_size=fm.batch_size, steps=fm.steps, seed=seed),
                      rng=substream(seed, "fm"))
    rows = []
    for start in range(0, len(result.losses), fm.log_every):
        chunk = result.losses[start : start + fm.log_every]
        rows.append(metric_row(iteration=start + len(chunk), policy_loss=float(np.mean(chunk))))
    return field, rows


def evaluate_field(cfg: ExperimentConfig, field: VelocityField, seed: int) -> float:
    return evaluate_base(cfg.env, field, schedule_for(cfg), cfg.eval_episodes, seed, tag="final").success_rate


def run_online(cfg: ExperimentConfig, field: VelocityField, seed: int, ppo_overrides: dict | None = None):
    ppo = replace(cfg.ppo, seed=seed, **(ppo_overrides or {}))
    return train_online(cfg.env, field, cfg.method, ppo, schedule_for(cfg))


def collect(cfg: ExperimentConfig, field: VelocityField, seed: int) -> OfflineDataset:
    return collect_offline(cfg.env, field, schedule_for(cfg), cfg.offline_episodes, substream(seed, "corrector"))


def run_offline(cfg: ExperimentConfig, dataset: OfflineDataset, field: VelocityField, seed: int):
    return train_offline(dataset, field, cfg.env, replace(cfg.td3bc, seed=seed), schedule_for(cfg))


# ------------------------------------------------------------------ run dirs


def metric_row(**values) -> dict:
    row = {c: float("nan") for c in METRIC_COLUMNS}
    row["env_steps"] = 0
    row.update(values)
    return row


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_metrics(path, rows, extra_columns: tuple[str, ...] = ()) -> None:
    """CSV with the standard columns first; extra columns follow, nothing is dropped."""
    columns = list(METRIC_COLUMNS) + list(extra_columns)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            unknown = set(row) - set(columns)
            if unknown:
                raise ValueError(f"metrics row has undeclared columns {sorted(unknown)}")
            w.writerow([_fmt(row.get(c, float("nan"))) for c in columns])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def output_root(cfg: ExperimentConfig, cli_value: str | None = None) -> Path:
    root = cli_value or cfg.output_dir or os.environ.get("RFS_OUTPUT_DIR")
    if not root:
        raise ValueError("no output directory: set output_dir in the config, pass --output-dir or set RFS_OUTPUT_DIR")
    return Path(root)


def new_run_dir(root: Path, cfg: ExperimentConfig, stage: str) -> Path:
    """``<root>/<UTC timestamp>-<stage>-<config hash prefix>``; suffixed if taken."""
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S")
    base = f"{stamp}-{stage}-{cfg.config_hash()[:10]}"
    root.mkdir(parents=True, exist_ok=True)
    path, n = root / base, 1
    while True:
        try:
            path.mkdir()
            break
        except FileExistsError:
            n += 1
            path = root / f"{base}-{n}"
    (path / "config.yaml").write_text(cfg.dump())
    return path


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    """Strict JSON: NaN becomes null."""
    Path(path).write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")
