"""PPO with GAE over the joint (latent, residual) modulation policy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import Adam, Mlp
from .envs import EnvSpec, env_reset, observe
from .flowpolicy import IntegrationSchedule, VelocityField, denoise
from .modulation import Mode, ModulationPolicy, _normal_logp
from .rollout import evaluate_base, evaluate_policy, execute_chunk
from .seeding import substream

log = logging.getLogger(__name__)


@dataclass
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    policy_lr: float = 3e-4
    value_lr: float = 1e-3
    clip_eps: float = 0.2
    value_coef: float = 0.5
    max_grad_norm: float = 1.0
    minibatch_size: int = 1024
    n_envs: int = 16
    rollout_len: int = 40
    epochs_per_batch: int = 4
    iterations: int = 200
    entropy_coef: float = 0.0
    seed: int = 0
    hidden: tuple[int, ...] = (256, 128, 64)
    eval_every: int = 10
    eval_episodes: int = 100
    final_eval_episodes: int = 200
    ratio_guard: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """GAE over a ``(T, ...)`` trajectory; ``values`` carries one extra bootstrap row."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape[0] != T:
        raise ValueError("values needs T + 1 entries and dones T entries")
    adv = np.zeros_like(rewards)
    last = np.zeros_like(rewards[0])
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * nonterminal * values[t + 1] - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:-1]


@dataclass
class RolloutBatch:
    obs: np.ndarray
    u0: np.ndarray
    ur: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_successes: list = field(default_factory=list)

    def finish(self, gamma: float, lam: float) -> None:
        adv, ret = compute_gae(self.rewards, self.values, self.dones, gamma, lam)
        self.returns = ret.reshape(-1)
        self.advantages = normalize_advantages(adv.reshape(-1))

    def flat(self):
        d = self.u0.shape[-1]
        return (
            self.obs.reshape(-1, self.obs.shape[-1]),
            self.u0.reshape(-1, d),
            self.ur.reshape(-1, d),
            self.logp.reshape(-1),
        )


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


# ------------------------------------------------------------------- losses


def policy_loss(policy: ModulationPolicy, obs, u0, ur, logp_old, adv, clip_eps: float, entropy_coef: float = 0.0):
    """Clipped surrogate over the pre-squash Gaussian likelihood of ``(u0, u_r)``.

    The tanh Jacobian is identical under old and new parameters, so it drops
    out of the ratio. Returns ``(loss, grads, info)`` with grads ordered as
    :meth:`ModulationPolicy.params`.
    """
    n = obs.shape[0]
    out, cache = policy.net.forward_cache(obs)
    d = policy.flat_dim
    mu0, mur = out[:, :d], out[:, d:]
    steer, corr = policy.mode.steers, policy.mode.corrects
    ls0 = policy.log_std_a0.astype(np.float64)
    lsr = policy.log_std_ar.astype(np.float64)
    logp = np.zeros(n)
    if steer:
        logp = logp + _normal_logp(u0, mu0, ls0)
    if corr:
        logp = logp + _normal_logp(ur, mur, lsr)
    ratio = np.exp(logp - logp_old)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr = np.minimum(ratio * adv, clipped * adv)
    entropy = 0.0
    if steer:
        entropy += float(np.sum(ls0) + 0.5 * d * (1.0 + np.log(2 * np.pi)))
    if corr:
        entropy += float(np.sum(lsr) + 0.5 * d * (1.0 + np.log(2 * np.pi)))
    loss = -float(np.mean(surr)) - entropy_coef * entropy
    # gradient flows only where the unclipped branch attains the minimum
    active = ratio * adv <= clipped * adv
    dlogp = np.where(active, -adv * ratio / n, 0.0)
    g_out = np.zeros_like(out)
    g_ls0 = np.zeros(d)
    g_lsr = np.zeros(d)
    if steer:
        z = (u0 - mu0) * np.exp(-ls0)
        g_out[:, :d] = dlogp[:, None] * z * np.exp(-ls0)
        g_ls0 = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - entropy_coef
    if corr:
        z = (ur - mur) * np.exp(-lsr)
        g_out[:, d:] = dlogp[:, None] * z * np.exp(-lsr)
        g_lsr = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - entropy_coef
    grads, _ = policy.net.backward(cache, g_out)
    info = {"mean_ratio": float(np.mean(ratio)), "clip_frac": float(np.mean(np.abs(ratio - 1) > clip_eps))}
    return loss, grads + [g_ls0, g_lsr], info


def value_loss(value_net: Mlp, obs, returns, value_coef: float):
    v, cache = value_net.forward_cache(obs)
    diff = v[:, 0] - returns
    loss = value_coef * float(np.mean(diff * diff))
    grads, _ = value_net.backward(cache, (2.0 * value_coef * diff / diff.size)[:, None])
    return loss, grads


# ------------------------------------------------------------------ learner


class PPOLearner:
    """Policy, value net and their optimisers."""

    def __init__(self, policy: ModulationPolicy, value_net: Mlp, config: PPOConfig):
        self.policy = policy
        self.value_net = value_net
        self.config = config
        self.policy_opt = Adam(policy.params(), lr=config.policy_lr, max_grad_norm=config.max_grad_norm)
        self.value_opt = Adam(value_net.params(), lr=config.value_lr, max_grad_norm=config.max_grad_norm)


def ppo_update(learner: PPOLearner, batch: RolloutBatch, rng: np.random.Generator) -> dict:
    cfg = learner.config
    obs, u0, ur, logp_old = batch.flat()
    adv, ret = batch.advantages, batch.returns
    n = obs.shape[0]
    mb = min(cfg.minibatch_size, n)
    p_losses, v_losses, ratios = [], [], []
    aborted = False
    for _epoch in range(cfg.epochs_per_batch):
        perm = rng.permutation(n)
        for start in range(0, n - mb + 1, mb):
            idx = perm[start : start + mb]
            pl, pg, info = policy_loss(learner.policy, obs[idx], u0[idx], ur[idx], logp_old[idx], adv[idx],
                                       cfg.clip_eps, cfg.entropy_coef)
            if abs(info["mean_ratio"] - 1.0) > cfg.ratio_guard:
                log.warning("mean ratio %.3g left the trust region; aborting epoch", info["mean_ratio"])
                aborted = True
                break
            learner.policy_opt.step(pg)
            learner.policy.clamp_log_std()
            vl, vg = value_loss(learner.value_net, obs[idx], ret[idx], cfg.value_coef)
            learner.value_opt.step(vg)
            p_losses.append(pl)
            v_losses.append(vl)
            ratios.append(info["mean_ratio"])
        if aborted:
            break
    return {
        "policy_loss": float(np.mean(p_losses)) if p_losses else float("nan"),
        "value_loss": float(np.mean(v_losses)) if v_losses else float("nan"),
        "mean_ratio": float(np.mean(ratios)) if ratios else float("nan"),
        "aborted": aborted,
    }


# ----------------------------------------------------------------- rollouts


class RolloutWorkers:
    """``n_envs`` environments with per-env RNG streams and auto-reset."""

    def __init__(self, spec: EnvSpec, n_envs: int, seed: int):
        self.spec = spec
        self.env_rngs = [substream(seed, "train", "env", i) for i in range(n_envs)]
        self.a0_rngs = [substream(seed, "train", "a0", i) for i in range(n_envs)]
        self.ar_rngs = [substream(seed, "train", "ar", i) for i in range(n_envs)]
        self.states = [env_reset(spec, r) for r in self.env_rngs]
        self.ep_returns = np.zeros(n_envs)

    def collect(self, policy: ModulationPolicy, value_net: Mlp, field: VelocityField,
                schedule: IntegrationSchedule, steps: int) -> RolloutBatch:
        spec, n = self.spec, len(self.states)
        d = policy.flat_dim
        obs_b = np.zeros((steps, n, policy.obs_dim))
        u0_b = np.zeros((steps, n, d))
        ur_b = np.zeros((steps, n, d))
        logp_b = np.zeros((steps, n))
        rew_b = np.zeros((steps, n))
        val_b = np.zeros((steps + 1, n))
        done_b = np.zeros((steps, n))
        batch_returns, batch_successes = [], []
        std0 = np.exp(policy.log_std_a0.astype(np.float64))
        stdr = np.exp(policy.log_std_ar.astype(np.float64))
        for t in range(steps):
            obs = np.stack([observe(spec, s) for s in self.states])
            mu0, mur = policy.means(obs)
            z0 = np.stack([r.standard_normal(d) for r in self.a0_rngs])
            zr = np.stack([r.standard_normal(d) for r in self.ar_rngs])
            if policy.mode.steers:
                u0 = mu0 + std0 * z0
                a0 = policy.a0_scale * np.tanh(u0)
            else:
                u0, a0 = np.zeros_like(mu0), z0
            if policy.mode.corrects:
                ur = mur + stdr * zr
                ar = policy.residual_bound * np.tanh(ur)
            else:
                ur, ar = np.zeros_like(mur), np.zeros_like(mur)
            logp_b[t] = policy._gaussian_logp(mu0, mur, u0, ur)
            a = denoise(field, obs, a0, schedule) + ar
            val_b[t] = value_net.forward(obs)[:, 0]
            obs_b[t], u0_b[t], ur_b[t] = obs, u0, ur
            for i in range(n):
                self.states[i], r, done = execute_chunk(spec, self.states[i], a[i], self.env_rngs[i])
                rew_b[t, i] = r
                done_b[t, i] = float(done)
                self.ep_returns[i] += r
                if done:
                    batch_returns.append(self.ep_returns[i])
                    batch_successes.append(self.states[i].success)
                    self.ep_returns[i] = 0.0
                    self.states[i] = env_reset(spec, self.env_rngs[i])
        obs = np.stack([observe(spec, s) for s in self.states])
        val_b[steps] = value_net.forward(obs)[:, 0]
        return RolloutBatch(obs_b, u0_b, ur_b, logp_b, rew_b, val_b, done_b,
                            episode_returns=batch_returns, episode_successes=batch_successes)


# ------------------------------------------------------------------ driver


@dataclass
class OnlineResult:
    policy: ModulationPolicy
    best_policy: ModulationPolicy
    value_net: Mlp
    metrics: list[dict]
    initial_success: float
    base_success: float
    final_success: float


def make_policy(spec: EnvSpec, field: VelocityField, method, hidden=(256, 128, 64), seed: int = 0,
                a0_scale: float = 3.0) -> ModulationPolicy:
    return ModulationPolicy(method, spec.obs_dim, field.flat_dim, hidden=hidden, a0_scale=a0_scale,
                            residual_bound=spec.residual_bound, rng=substream(seed, "policy"))


def train_online(spec: EnvSpec, field: VelocityField, method, config: PPOConfig | None = None,
                 schedule: IntegrationSchedule | None = None, policy: ModulationPolicy | None = None,
                 callback=None) -> OnlineResult:
    """Fine-tune a modulation policy with PPO while ``field`` stays frozen."""
    cfg = config or PPOConfig()
    schedule = schedule or IntegrationSchedule.uniform(8)
    mode = Mode.parse(method)
    frozen = field.param_hash()
    policy = policy or make_policy(spec, field, mode, cfg.hidden, cfg.seed)
    value_net = Mlp([spec.obs_dim, *cfg.hidden, 1], rng=substream(cfg.seed, "value"))
    learner = PPOLearner(policy, value_net, cfg)
    workers = RolloutWorkers(spec, cfg.n_envs, cfg.seed)
    update_rng = substream(cfg.seed, "ppo-minibatch")

    base = evaluate_base(spec, field, schedule, cfg.final_eval_episodes, cfg.seed, tag="final")
    init = evaluate_policy(spec, policy, field, schedule, cfg.final_eval_episodes, cfg.seed, tag="final")
    best_success, best_policy = -1.0, policy.copy()
    metrics: list[dict] = []
    env_steps = 0
    for it in range(1, cfg.iterations + 1):
        batch = workers.collect(policy, value_net, field, schedule, cfg.rollout_len)
        env_steps += cfg.rollout_len * cfg.n_envs * field.chunk_len
        batch.finish(cfg.gamma, cfg.gae_lambda)
        info = ppo_update(learner, batch, update_rng)
        row = {
            "iteration": it,
            "env_steps": env_steps,
            "success_rate": float(np.mean(batch.episode_successes)) if batch.episode_successes else float("nan"),
            "mean_return": float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan"),
            "policy_loss": info["policy_loss"],
            "value_loss": info["value_loss"],
            "mean_ratio": info["mean_ratio"],
        }
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            ev = evaluate_policy(spec, policy, field, schedule, cfg.eval_episodes, cfg.seed, tag=f"select-{it}")
            if ev.success_rate > best_success:
                best_success, best_policy = ev.success_rate, policy.copy()
        metrics.append(row)
        if callback is not None:
            callback(row)
    if field.param_hash() != frozen:
        raise RuntimeError("base velocity field changed during fine-tuning")
    final = evaluate_policy(spec, best_policy, field, schedule, cfg.final_eval_episodes, cfg.seed, tag="final")
    return OnlineResult(policy, best_policy, value_net, metrics, init.success_rate, base.success_rate,
                        final.success_rate)
