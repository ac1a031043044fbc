"""
Steering the base online with PPO
=================================

ModalOffsetReach needs two things at once: choose the rewarded mode, and
land on a target shifted off the demonstrated goal. Latent steering alone can
only pick among behaviours the base already has; a bounded residual alone
cannot switch modes. This demo fine-tunes each method briefly on the same
frozen base and prints the success of its training episodes as it goes.

Expect several minutes per method on one core. The shipped configs train far
longer; the trend is what matters here.

    python demos/02_online_steering.py
"""

# %%
from dataclasses import replace

from rfs.harness.config import load_config
from rfs.harness.pipeline import evaluate_field, fit_field, make_demos, run_online

cfg = load_config("configs/modal_offset_reach.yaml")
cfg = replace(cfg, fm=replace(cfg.fm, hidden=(64, 64), steps=4000, demo_episodes=200), eval_episodes=100)
field, _ = fit_field(cfg, make_demos(cfg, 0), 0)
print(f"frozen base success: {evaluate_field(cfg, field, 0):.2f}")

# %%
# Every method starts from the base behaviour: the latent head's mean is
# zero and the residual head's mean is zero, so the initial success should
# match the line above up to sampling noise.
overrides = dict(iterations=60, eval_every=20, eval_episodes=50, final_eval_episodes=100)
for method in ("rfs", "dsrl", "residual"):
    res = run_online(replace(cfg, method=method), field, 0, overrides)
    curve = " ".join(f"{row['success_rate']:.2f}" for row in res.metrics[9::10])
    print(f"{method:>8}: initial {res.initial_success:.2f}  every 10 iterations {curve}  final {res.final_success:.2f}")
