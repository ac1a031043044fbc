"""
A frozen flow-matching base on the two-goal reach
=================================================

Train a small velocity field on scripted demonstrations of ModalReach, then
look at what the Euler sampler does with it. Runs in under a minute.

    python demos/01_frozen_base.py
"""

# %%
# The expert picks one of two goal centres per episode, so the demonstrated
# first actions point both left and right from the same start state.
import numpy as np

from rfs.envs import env_reset, generate_demos, make_env, observe
from rfs.flowpolicy import FMConfig, IntegrationSchedule, VelocityField, denoise, train_fm
from rfs.rollout import evaluate_base
from rfs.seeding import substream

spec = make_env("ModalReach")
demos = generate_demos(spec, 100, substream(0, "demos"))
print(f"{len(demos.states)} (state, action) pairs, action bound {spec.action_bound}")

# %%
# A modest field trains quickly. The loss is the squared error between the
# predicted velocity and the straight-path velocity a1 - a0.
field = VelocityField(2, spec.obs_dim, hidden=(64, 64), action_scale=spec.action_bound, rng=substream(0, "fm-init"))
result = train_fm(field, demos, FMConfig(steps=10000), rng=substream(0, "fm"))
print("loss, first vs last 100 steps:", np.mean(result.losses[:100]).round(4), np.mean(result.losses[-100:]).round(4))

# %%
# From a start state, push a batch of Gaussian latents through the sampler.
# One Euler step collapses everything to the conditional mean (near zero
# x-velocity); eight steps keep the two directions apart.
obs = observe(spec, env_reset(spec, np.random.default_rng(1)))
latents = np.random.default_rng(2).standard_normal((500, 2))
states = np.repeat(obs[None], 500, axis=0)
for K in (1, 8):
    vx = denoise(field, states, latents, IntegrationSchedule.uniform(K))[:, 0]
    print(f"K={K}: fraction heading left {np.mean(vx < -0.05):.2f}, right {np.mean(vx > 0.05):.2f}")

# %%
# Only the right-hand goal pays. A base that splits its mass between the two
# therefore succeeds about half the time.
ev = evaluate_base(spec, field, IntegrationSchedule.uniform(8), n_episodes=200, seed=0)
print(f"base success on ModalReach: {ev.success_rate:.2f}")
