"""Batched closed-loop evaluation of base and modulated policies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .envs import EnvSpec, EnvState, env_reset, env_step, observe
from .flowpolicy import IntegrationSchedule, VelocityField, denoise
from .modulation import ModulationPolicy
from .seeding import substream

# act(obs_batch, episode_indices) -> executed action chunks, shape (n, 2 * H)
ActFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


def execute_chunk(spec: EnvSpec, state: EnvState, chunk, rng):
    """Run a flat action chunk open loop. Returns ``(state, reward_sum, done)``."""
    total = 0.0
    for a in np.asarray(chunk, dtype=np.float64).reshape(-1, 2):
        state, tr = env_step(spec, state, a, rng)
        total += tr.r
        if tr.done:
            break
    return state, total, state.done


@dataclass
class EvalResult:
    success_rate: float
    mean_return: float
    successes: np.ndarray
    returns: np.ndarray


def run_episodes(spec: EnvSpec, act: ActFn, n_episodes: int, seed: int, tag: str = "eval") -> EvalResult:
    """All episodes advance in lockstep so the policy sees one batch per step.

    Episode ``i`` draws its start and disturbances from ``substream(seed, tag, "env", i)``.
    """
    env_rngs = [substream(seed, tag, "env", i) for i in range(n_episodes)]
    states = [env_reset(spec, r) for r in env_rngs]
    returns = np.zeros(n_episodes)
    while True:
        live = np.array([i for i, s in enumerate(states) if not s.done], dtype=int)
        if live.size == 0:
            break
        obs = np.stack([observe(spec, states[i]) for i in live])
        chunks = act(obs, live)
        for j, i in enumerate(live):
            states[i], r, _ = execute_chunk(spec, states[i], chunks[j], env_rngs[i])
            returns[i] += r
    successes = np.array([s.success for s in states])
    return EvalResult(float(successes.mean()), float(returns.mean()), successes, returns)


def latent_rngs(seed: int, tag: str, n: int):
    return [substream(seed, tag, "a0", i) for i in range(n)], [substream(seed, tag, "ar", i) for i in range(n)]


def base_actor(field: VelocityField, schedule: IntegrationSchedule, seed: int, n: int, tag: str = "eval") -> ActFn:
    """Frozen flow policy with ``a0 ~ N(0, I)``."""
    rngs, _ = latent_rngs(seed, tag, n)

    def act(obs, idx):
        a0 = np.stack([rngs[i].standard_normal(field.flat_dim) for i in idx])
        return denoise(field, obs, a0, schedule)

    return act


def policy_actor(policy: ModulationPolicy, field: VelocityField, schedule: IntegrationSchedule, seed: int, n: int,
                 tag: str = "eval", deterministic: bool = False) -> ActFn:
    rngs0, rngsr = latent_rngs(seed, tag, n)
    d = field.flat_dim

    def act(obs, idx):
        if deterministic:
            a0, ar = policy.deterministic(obs)
            if not policy.mode.steers:
                a0 = np.stack([rngs0[i].standard_normal(d) for i in idx])
        else:
            mu0, mur = policy.means(obs)
            std0 = np.exp(policy.log_std_a0.astype(np.float64))
            stdr = np.exp(policy.log_std_ar.astype(np.float64))
            z0 = np.stack([rngs0[i].standard_normal(d) for i in idx])
            if policy.mode.steers:
                a0 = policy.a0_scale * np.tanh(mu0 + std0 * z0)
            else:
                a0 = z0
            if policy.mode.corrects:
                zr = np.stack([rngsr[i].standard_normal(d) for i in idx])
                ar = policy.residual_bound * np.tanh(mur + stdr * zr)
            else:
                ar = np.zeros_like(mur)
        return denoise(field, obs, a0, schedule) + ar

    return act


def evaluate_base(spec, field, schedule, n_episodes=200, seed=0, tag="eval") -> EvalResult:
    return run_episodes(spec, base_actor(field, schedule, seed, n_episodes, tag), n_episodes, seed, tag)


def evaluate_policy(spec, policy, field, schedule, n_episodes=200, seed=0, tag="eval", deterministic=False) -> EvalResult:
    act = policy_actor(policy, field, schedule, seed, n_episodes, tag, deterministic)
    return run_episodes(spec, act, n_episodes, seed, tag)
