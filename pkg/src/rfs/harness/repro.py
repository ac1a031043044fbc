"""Methods x environments x seeds grid with a summary table."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .config import ExperimentConfig, env_from_dict
from .pipeline import evaluate_field, fit_field, make_demos, metric_row, run_online, write_json, write_metrics

log = logging.getLogger(__name__)

Z95 = NormalDist().inv_cdf(0.975)


def mean_halfwidth(values) -> tuple[float, float]:
    """Mean and 95% normal-approximation half-width (sample std over sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size == 1:
        return float(v[0]), float("nan")
    return float(v.mean()), float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class ReproResult:
    envs: tuple[str, ...]
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    # (env, method) -> {seed: final success}
    cells: dict = field(default_factory=dict)
    # same keys; success of the untrained modulated policy
    initial: dict = field(default_factory=dict)
    base: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.errors and all(
            len(self.cells.get((e, m), {})) == len(self.seeds) for e in self.envs for m in self.methods
        )

    def stats(self, env: str, method: str) -> tuple[float, float]:
        return mean_halfwidth(list(self.cells.get((env, method), {}).values()))

    def markdown(self) -> str:
        head = "| method | " + " | ".join(self.envs) + " |"
        rule = "|---|" + "---|" * len(self.envs)
        lines = [head, rule]
        for m in self.methods:
            cells = []
            for e in self.envs:
                mu, hw = self.stats(e, m)
                cells.append("n/a" if math.isnan(mu) else f"{mu:.3f} ± {hw:.3f}")
            lines.append(f"| {m} | " + " | ".join(cells) + " |")
        if not self.complete:
            lines.append("")
            lines.append("**incomplete**: some cells failed or were not run")
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[list]:
        rows = [["method", "env", "mean", "half_width", "n"]]
        for m in self.methods:
            for e in self.envs:
                mu, hw = self.stats(e, m)
                rows.append([m, e, repr(mu), repr(hw), len(self.cells.get((e, m), {}))])
        return rows

    def summary(self, episodes: int) -> dict:
        return {
            "final_success": {e: {m: self.stats(e, m)[0] for m in self.methods} for e in self.envs},
            "half_width": {e: {m: self.stats(e, m)[1] for m in self.methods} for e in self.envs},
            "per_seed": {e: {m: {str(s): v for s, v in sorted(self.cells.get((e, m), {}).items())}
                             for m in self.methods} for e in self.envs},
            "initial_success": {e: {m: {str(s): v for s, v in sorted(self.initial.get((e, m), {}).items())}
                                    for m in self.methods} for e in self.envs},
            "base_success": {e: {str(s): v for s, v in sorted(self.base.get(e, {}).items())} for e in self.envs},
            "episodes": episodes,
            "seeds": list(self.seeds),
            "complete": self.complete,
            "errors": self.errors,
        }


def env_config(cfg: ExperimentConfig, env_name: str) -> ExperimentConfig:
    env = cfg.env if cfg.env.name == env_name else env_from_dict({"name": env_name})
    return replace(cfg, env=env)


def run_repro(cfg: ExperimentConfig, run_dir: Path) -> ReproResult:
    """Train one base per (env, seed), fine-tune every method on it, and tabulate."""
    rs = cfg.repro
    result = ReproResult(rs.envs, rs.methods, cfg.seeds)
    top_rows = []
    for env_name in rs.envs:
        ecfg = env_config(cfg, env_name)
        for seed in cfg.seeds:
            try:
                field, _ = fit_field(ecfg, make_demos(ecfg, seed), seed)
                result.base.setdefault(env_name, {})[seed] = evaluate_field(ecfg, field, seed)
            except (ValueError, FloatingPointError, RuntimeError) as e:
                result.errors.append({"env": env_name, "seed": seed, "stage": "train-fm", "error": str(e)})
                continue
            for method in rs.methods:
                mcfg = replace(ecfg, method=method)
                try:
                    res = run_online(mcfg, field, seed, rs.ppo_overrides.get(env_name))
                except (ValueError, FloatingPointError, RuntimeError) as e:
                    result.errors.append({"env": env_name, "seed": seed, "method": method, "stage": "train-online",
                                          "error": str(e)})
                    continue
                result.cells.setdefault((env_name, method), {})[seed] = res.final_success
                result.initial.setdefault((env_name, method), {})[seed] = res.initial_success
                cell_dir = run_dir / "cells" / f"{env_name}-{method}-seed{seed}"
                cell_dir.mkdir(parents=True, exist_ok=True)
                write_metrics(cell_dir / "metrics.csv", res.metrics)
                last = res.metrics[-1] if res.metrics else {}
                top_rows.append({**metric_row(iteration=last.get("iteration", 0), env_steps=last.get("env_steps", 0),
                                              success_rate=res.final_success,
                                              mean_return=last.get("mean_return", float("nan")),
                                              policy_loss=last.get("policy_loss", float("nan")),
                                              value_loss=last.get("value_loss", float("nan")),
                                              mean_ratio=last.get("mean_ratio", float("nan"))),
                                 "env": env_name, "method": method, "seed": seed})
                log.info("%s %s seed %d: %.3f", env_name, method, seed, res.final_success)
    write_metrics(run_dir / "metrics.csv", top_rows, extra_columns=("env", "method", "seed"))
    (run_dir / "table.md").write_text(result.markdown())
    with open(run_dir / "table.csv", "w") as f:
        f.write("\n".join(",".join(str(c) for c in row) for row in result.csv_rows()) + "\n")
    write_json(run_dir / "summary.json", result.summary(cfg.eval_episodes))
    return result
