import json
import math
from pathlib import Path

import pytest

from rfs.harness.cli import main
from rfs.harness.repro import ReproResult, mean_halfwidth

ENVS = ("OffsetReach", "ModalReach", "ModalOffsetReach")
METHODS = ("rfs", "dsrl", "residual")


def test_half_width_oracle():
    # values 0.2, 0.4, 0.6: mean 0.4, sample std 0.2, half-width 1.959964 * 0.2 / sqrt(3)
    mu, hw = mean_halfwidth([0.2, 0.4, 0.6])
    assert mu == pytest.approx(0.4)
    assert hw == pytest.approx(1.959964 * 0.2 / math.sqrt(3), rel=1e-6)
    assert mean_halfwidth([0.5, 0.5]) == (0.5, 0.0)
    mu, hw = mean_halfwidth([0.7])
    assert mu == 0.7 and math.isnan(hw)


def full_result():
    r = ReproResult(ENVS, METHODS, (0, 1))
    for e in ENVS:
        for m in METHODS:
            r.cells[(e, m)] = {0: 0.5, 1: 0.7}
    return r


def test_complete_table_shape():
    r = full_result()
    assert r.complete
    lines = r.markdown().strip().splitlines()
    assert len(lines) == 2 + 3
    assert lines[0] == "| method | OffsetReach | ModalReach | ModalOffsetReach |"
    assert all(line.count("±") == 3 for line in lines[2:])
    assert len(r.csv_rows()) == 1 + 9
    s = r.summary(200)
    assert s["final_success"]["ModalReach"]["dsrl"] == pytest.approx(0.6) and s["complete"]


def test_partial_table_is_flagged():
    r = full_result()
    del r.cells[("ModalReach", "dsrl")][1]
    assert not r.complete and "incomplete" in r.markdown()
    r = full_result()
    r.errors.append({"env": "OffsetReach", "seed": 0, "error": "boom"})
    assert not r.complete and not r.summary(10)["complete"]


def test_tiny_end_to_end_table(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("""
fm: {hidden: [8], steps: 20, demo_episodes: 2, log_every: 10}
ppo: {iterations: 1, n_envs: 2, rollout_len: 5, minibatch_size: 10, epochs_per_batch: 1, hidden: [8],
      eval_every: 1, eval_episodes: 2}
eval_episodes: 3
seeds: [0, 1]
""")
    assert main(["repro", "--config", str(cfg), "--output-dir", str(tmp_path)]) == 0
    rd = Path(json.loads(capsys.readouterr().out)["run_dir"])
    table = (rd / "table.md").read_text().strip().splitlines()
    assert len(table) == 5 and "incomplete" not in "".join(table)
    assert len((rd / "table.csv").read_text().strip().splitlines()) == 10
    assert len(list((rd / "cells").iterdir())) == 18
    summary = json.loads((rd / "summary.json").read_text())
    assert summary["seeds"] == [0, 1] and summary["complete"]
    header = (rd / "metrics.csv").read_text().splitlines()[0]
    assert header.endswith(",env,method,seed")
