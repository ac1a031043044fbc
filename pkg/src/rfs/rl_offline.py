"""Offline fine-tuning from corrected rollouts with TD3+BC.

The dataset logs, per step, the latent ``a0`` fed to the frozen flow policy,
the base action ``a_b`` it produced and the bounded residual
``a_r = a_human - a_b`` applied by a corrector. The actor is the usual
two-headed :class:`~rfs.modulation.ModulationPolicy` run with deterministic
heads; the critic sees the action through one of three conditionings.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Adam, Mlp
from .envs import EnvSpec, env_reset, env_step, observe, scripted_corrector
from .flowpolicy import IntegrationSchedule, VelocityField, denoise, denoise_with_vjp, sample_action
from .modulation import Mode, ModulationPolicy, residual_from_correction
from .rollout import evaluate_policy
from .seeding import substream

log = logging.getLogger(__name__)

DATASET_KIND = "rfs-offline-v1"


class CriticVariant(str, enum.Enum):
    Q_RESIDUAL = "residual"
    Q_CONCAT = "concat"
    Q_EXECUTED = "executed"

    @classmethod
    def parse(cls, value) -> "CriticVariant":
        if isinstance(value, CriticVariant):
            return value
        for v in cls:
            if value in (v.value, v.name):
                return v
        raise ValueError(f"unknown critic variant {value!r}; expected residual, concat or executed")


# ------------------------------------------------------------------ dataset


@dataclass
class OfflineTransition:
    o: np.ndarray
    a0: np.ndarray
    a_r: np.ndarray
    a_b: np.ndarray
    o_next: np.ndarray
    r: float
    done: bool

    def to_json(self) -> dict:
        return {
            "o": self.o.tolist(), "a0": self.a0.tolist(), "a_r": self.a_r.tolist(), "a_b": self.a_b.tolist(),
            "o_next": self.o_next.tolist(), "r": float(self.r), "done": bool(self.done),
        }


@dataclass
class OfflineDataset:
    """Column-stored transitions plus the header that binds them to a field."""

    obs: np.ndarray
    a0: np.ndarray
    a_r: np.ndarray
    a_b: np.ndarray
    obs_next: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.obs.shape[0]

    @classmethod
    def from_transitions(cls, transitions, header: dict | None = None) -> "OfflineDataset":
        ts = list(transitions)
        if not ts:
            raise ValueError("no transitions")
        return cls(
            obs=np.stack([t.o for t in ts]),
            a0=np.stack([t.a0 for t in ts]),
            a_r=np.stack([t.a_r for t in ts]),
            a_b=np.stack([t.a_b for t in ts]),
            obs_next=np.stack([t.o_next for t in ts]),
            rewards=np.array([t.r for t in ts], dtype=np.float64),
            dones=np.array([t.done for t in ts], dtype=np.float64),
            header=dict(header or {}),
        )

    def transition(self, i: int) -> OfflineTransition:
        return OfflineTransition(self.obs[i], self.a0[i], self.a_r[i], self.a_b[i], self.obs_next[i],
                                 float(self.rewards[i]), bool(self.dones[i]))

    def split(self, holdout_fraction: float, rng: np.random.Generator) -> tuple["OfflineDataset", "OfflineDataset"]:
        """Random train/held-out split by transition."""
        n = len(self)
        perm = rng.permutation(n)
        k = int(round(n * holdout_fraction))
        if not 0 < k < n:
            raise ValueError("split leaves one side empty")
        return self.subset(np.sort(perm[k:])), self.subset(np.sort(perm[:k]))

    def subset(self, idx) -> "OfflineDataset":
        return OfflineDataset(self.obs[idx], self.a0[idx], self.a_r[idx], self.a_b[idx], self.obs_next[idx],
                              self.rewards[idx], self.dones[idx], dict(self.header))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"header": self.header}, sort_keys=True) + "\n")
            for i in range(len(self)):
                f.write(json.dumps(self.transition(i).to_json()) + "\n")

    @classmethod
    def load(cls, path, field: VelocityField | None = None) -> "OfflineDataset":
        """Read a dataset; with ``field`` given, verify it regenerates every ``a_b`` bit for bit."""
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"{path}: empty dataset file")
        first = json.loads(lines[0])
        if "header" not in first or first["header"].get("kind") != DATASET_KIND:
            raise ValueError(f"{path}: missing or foreign dataset header")
        ts = []
        for ln in lines[1:]:
            rec = json.loads(ln)
            ts.append(OfflineTransition(np.array(rec["o"], float), np.array(rec["a0"], float),
                                        np.array(rec["a_r"], float), np.array(rec["a_b"], float),
                                        np.array(rec["o_next"], float), float(rec["r"]), bool(rec["done"])))
        ds = cls.from_transitions(ts, first["header"])
        if field is not None:
            ds.verify(field)
        return ds

    def verify(self, field: VelocityField) -> None:
        """Check the field hash, the residual bound and that ``a_b`` is reproducible."""
        want = self.header.get("field_hash")
        if want is not None and want != field.param_hash():
            raise ValueError("dataset was collected with a different velocity field")
        bound = self.header.get("residual_bound")
        if bound is not None and np.any(np.abs(self.a_r) > bound * (1 + 1e-12)):
            raise ValueError("stored residual exceeds its bound")
        schedule = IntegrationSchedule(np.asarray(self.header["schedule"]["knots"]))
        for i in range(len(self)):
            # one row at a time, exactly as during collection
            if not np.array_equal(denoise(field, self.obs[i], self.a0[i], schedule), self.a_b[i]):
                raise ValueError(f"record {i}: base action not reproducible from its latent")


def collect_offline(spec: EnvSpec, field: VelocityField, schedule: IntegrationSchedule, n_episodes: int = 50,
                    rng: np.random.Generator | None = None) -> OfflineDataset:
    """Roll the frozen base policy while the scripted corrector adjusts each action.

    The executed action is the corrected one; the stored residual is the
    correction itself.
    """
    if field.chunk_len != 1:
        raise ValueError("offline collection corrects single-step actions (chunk_len must be 1)")
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    transitions: list[OfflineTransition] = []
    successes = []
    for _ in range(n_episodes):
        state = env_reset(spec, rng)
        while not state.done:
            obs = observe(spec, state)
            a_b, a0 = sample_action(field, obs, schedule, rng)
            a_human = scripted_corrector(spec, state, a_b)
            a_r = residual_from_correction(a_human, a_b)
            state, tr = env_step(spec, state, a_human, rng)
            transitions.append(OfflineTransition(obs, a0, a_r, a_b, tr.s_next, tr.r, tr.done))
        successes.append(state.success)
    header = {
        "kind": DATASET_KIND,
        "env": spec.name,
        "env_spec_hash": spec.spec_hash(),
        "field_hash": field.param_hash(),
        "schedule": schedule.to_dict(),
        "residual_bound": spec.residual_bound,
        "episodes": n_episodes,
        "corrected_success": float(np.mean(successes)),
    }
    return OfflineDataset.from_transitions(transitions, header)


# ------------------------------------------------------------------ critics


def conditioning(variant: CriticVariant, a_b, a_r, action_bound: float, residual_bound: float) -> np.ndarray:
    """Critic action input, each component divided by its natural bound."""
    if variant is CriticVariant.Q_RESIDUAL:
        return a_r / residual_bound
    if variant is CriticVariant.Q_CONCAT:
        return np.concatenate([a_r / residual_bound, a_b / action_bound], axis=-1)
    return (a_b + a_r) / action_bound


def conditioning_grad(variant: CriticVariant, g, action_bound: float, residual_bound: float):
    """Pull a cotangent on the conditioning back to ``(d/da_b, d/da_r)``."""
    if variant is CriticVariant.Q_RESIDUAL:
        return np.zeros_like(g), g / residual_bound
    if variant is CriticVariant.Q_CONCAT:
        d = g.shape[-1] // 2
        return g[..., d:] / action_bound, g[..., :d] / residual_bound
    return g / action_bound, g / action_bound


class CriticPair:
    """Twin Q networks on ``[obs, conditioning]`` with lagged copies."""

    def __init__(self, variant, obs_dim: int, flat_dim: int, hidden=(256, 256), rng=None):
        self.variant = CriticVariant.parse(variant)
        cond = 2 * flat_dim if self.variant is CriticVariant.Q_CONCAT else flat_dim
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim, self.flat_dim = int(obs_dim), int(flat_dim)
        self.q1 = Mlp([obs_dim + cond, *hidden, 1], rng=rng)
        self.q2 = Mlp([obs_dim + cond, *hidden, 1], rng=rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.updates = 0

    def sync_targets(self) -> None:
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()


@dataclass
class TD3BCConfig:
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    policy_delay: int = 10
    target_noise_std: float = 0.2
    target_noise_clip: float = 0.5
    bc_weight: float = 0.2
    batch_size: int = 512
    gamma: float = 0.99
    total_updates: int = 5000
    seed: int = 0
    critic_variant: str = "executed"
    a0_grad: str = "through_flow"
    actor_hidden: tuple[int, ...] = (256, 128, 64)
    critic_hidden: tuple[int, ...] = (128, 128)
    eval_every: int = 500
    eval_episodes: int = 100
    final_eval_episodes: int = 200

    def __post_init__(self):
        CriticVariant.parse(self.critic_variant)
        if self.a0_grad not in ("through_flow", "stopped"):
            raise ValueError("a0_grad must be 'through_flow' or 'stopped'")
        if self.policy_delay < 1 or self.batch_size < 1:
            raise ValueError("policy_delay and batch_size must be positive")
        self.actor_hidden = tuple(self.actor_hidden)
        self.critic_hidden = tuple(self.critic_hidden)

    @property
    def target_update_period(self) -> int:
        return self.policy_delay * 5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["actor_hidden"] = list(self.actor_hidden)
        d["critic_hidden"] = list(self.critic_hidden)
        return d


@dataclass
class Batch:
    obs: np.ndarray
    a_r: np.ndarray
    a_b: np.ndarray
    obs_next: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    index: np.ndarray | None = None


def draw_batch(ds: OfflineDataset, size: int, rng: np.random.Generator) -> Batch:
    idx = rng.integers(0, len(ds), size=size)
    return Batch(ds.obs[idx], ds.a_r[idx], ds.a_b[idx], ds.obs_next[idx], ds.rewards[idx], ds.dones[idx], idx)


def _q(net: Mlp, obs, cond) -> tuple[np.ndarray, tuple]:
    out, cache = net.forward_cache(np.concatenate([obs, cond], axis=1))
    return out[:, 0], cache


def td_target(rewards, dones, gamma: float, q1_next, q2_next) -> np.ndarray:
    y = np.asarray(rewards, float) + gamma * (1.0 - np.asarray(dones, float)) * np.minimum(q1_next, q2_next)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite TD target")
    return y


def greedy_base(policy: ModulationPolicy, field: VelocityField, schedule: IntegrationSchedule, obs) -> np.ndarray:
    """Base action under the deterministic latent head."""
    mu0, _ = policy.means(obs)
    a0 = policy.a0_scale * np.tanh(mu0) if policy.mode.steers else np.zeros_like(mu0)
    return denoise(field, obs, a0, schedule)


def next_actions(policy: ModulationPolicy, field: VelocityField, schedule: IntegrationSchedule, obs_next,
                 config: TD3BCConfig, rng: np.random.Generator, a_b_next=None):
    """Deterministic next latent and residual, smoothing noise on the residual only.

    ``a_b_next`` may carry base actions already pushed through the field.
    """
    _, mur = policy.means(obs_next)
    a_b = greedy_base(policy, field, schedule, obs_next) if a_b_next is None else a_b_next
    if policy.mode.corrects:
        noise = np.clip(config.target_noise_std * rng.standard_normal(mur.shape),
                        -config.target_noise_clip, config.target_noise_clip)
        a_r = policy.residual_bound * np.tanh(mur + noise)
    else:
        a_r = np.zeros_like(mur)
    return a_b, a_r


def critic_loss(critics: CriticPair, obs, cond, y):
    """Summed squared TD error of both critics (batch mean). Returns ``(loss, grads_q1, grads_q2)``."""
    n = obs.shape[0]
    q1, c1 = _q(critics.q1, obs, cond)
    q2, c2 = _q(critics.q2, obs, cond)
    d1, d2 = q1 - y, q2 - y
    loss = float(np.mean(d1 * d1) + np.mean(d2 * d2))
    g1, _ = critics.q1.backward(c1, (2.0 * d1 / n)[:, None])
    g2, _ = critics.q2.backward(c2, (2.0 * d2 / n)[:, None])
    return loss, g1, g2


def critic_update(critics: CriticPair, policy: ModulationPolicy, field: VelocityField, batch: Batch,
                  config: TD3BCConfig, schedule: IntegrationSchedule, opts, rng: np.random.Generator,
                  action_bound: float, a_b_next=None) -> float:
    """One TD step on both critics; hard target sync on the configured period."""
    v = critics.variant
    a_b_next, a_r_next = next_actions(policy, field, schedule, batch.obs_next, config, rng, a_b_next)
    cond_next = conditioning(v, a_b_next, a_r_next, action_bound, policy.residual_bound)
    q1n, _ = _q(critics.q1_target, batch.obs_next, cond_next)
    q2n, _ = _q(critics.q2_target, batch.obs_next, cond_next)
    y = td_target(batch.rewards, batch.dones, config.gamma, q1n, q2n)
    cond = conditioning(v, batch.a_b, batch.a_r, action_bound, policy.residual_bound)
    loss, g1, g2 = critic_loss(critics, batch.obs, cond, y)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite critic loss")
    opts[0].step(g1)
    opts[1].step(g2)
    critics.updates += 1
    if critics.updates % config.target_update_period == 0:
        critics.sync_targets()
    return loss


def actor_loss(policy: ModulationPolicy, critics: CriticPair, field: VelocityField, schedule: IntegrationSchedule,
               obs, a_r_data, bc_weight: float, action_bound: float, a0_grad: str = "through_flow"):
    """``-Q1(o, a_hat) + bc_weight * |a_hat_r - a_r|^2`` with residuals measured in units of the bound.

    Returns ``(loss, grads, info)``; grads follow :meth:`ModulationPolicy.params`
    (the two log-std entries are zero because the heads are deterministic).
    """
    n = obs.shape[0]
    d = policy.flat_dim
    eps = policy.residual_bound
    out, cache = policy.net.forward_cache(obs)
    mu0, mur = out[:, :d], out[:, d:]
    steer, corr = policy.mode.steers, policy.mode.corrects
    t0 = np.tanh(mu0)
    a0 = policy.a0_scale * t0 if steer else np.zeros_like(mu0)
    tr = np.tanh(mur)
    a_r = eps * tr if corr else np.zeros_like(mur)
    a_b, vjp = denoise_with_vjp(field, obs, a0, schedule)
    cond = conditioning(critics.variant, a_b, a_r, action_bound, eps)
    inp = np.concatenate([obs, cond], axis=1)
    q, qcache = critics.q1.forward_cache(inp)
    bc_diff = (a_r - a_r_data) / eps
    bc = float(np.mean(np.sum(bc_diff * bc_diff, axis=1)))
    loss = -float(np.mean(q)) + bc_weight * bc
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite actor loss")
    _, g_in = critics.q1.backward(qcache, np.full((n, 1), -1.0 / n))
    g_ab, g_ar = conditioning_grad(critics.variant, g_in[:, obs.shape[1]:], action_bound, eps)
    g_ar = g_ar + bc_weight * 2.0 * bc_diff / (eps * n)
    g_out = np.zeros_like(out)
    if corr:
        g_out[:, d:] = g_ar * eps * (1.0 - tr * tr)
    if steer and a0_grad == "through_flow" and critics.variant is not CriticVariant.Q_RESIDUAL:
        g_a0 = vjp(g_ab)
        g_out[:, :d] = g_a0 * policy.a0_scale * (1.0 - t0 * t0)
    grads, _ = policy.net.backward(cache, g_out)
    info = {"q": float(np.mean(q)), "bc": bc}
    return loss, grads + [np.zeros(d), np.zeros(d)], info


@dataclass
class OfflineResult:
    policy: ModulationPolicy
    best_policy: ModulationPolicy
    critics: CriticPair
    metrics: list[dict]
    final_success: float


def train_offline(dataset: OfflineDataset, field: VelocityField, spec: EnvSpec, config: TD3BCConfig | None = None,
                  schedule: IntegrationSchedule | None = None, callback=None) -> OfflineResult:
    """TD3+BC over a fixed dataset; the environment is touched only for evaluation."""
    cfg = config or TD3BCConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if schedule is None:
        knots = dataset.header.get("schedule", {}).get("knots")
        schedule = IntegrationSchedule(np.asarray(knots)) if knots is not None else IntegrationSchedule.uniform(8)
    frozen = field.param_hash()
    seed = cfg.seed
    policy = ModulationPolicy(Mode.RFS, spec.obs_dim, field.flat_dim, hidden=cfg.actor_hidden,
                              residual_bound=spec.residual_bound, rng=substream(seed, "offline-actor"))
    critics = CriticPair(cfg.critic_variant, spec.obs_dim, field.flat_dim, cfg.critic_hidden,
                         rng=substream(seed, "offline-critic"))
    critic_opts = (Adam(critics.q1.params(), lr=cfg.critic_lr), Adam(critics.q2.params(), lr=cfg.critic_lr))
    actor_opt = Adam(policy.net.params(), lr=cfg.actor_lr)
    batch_rng = substream(seed, "offline-batch")
    noise_rng = substream(seed, "offline-noise")
    metrics: list[dict] = []
    best_success, best_policy = -1.0, policy.copy()
    c_losses, a_losses = [], []
    # the latent head only moves on actor steps, so next-state base actions
    # are pushed through the field once per actor step for the whole dataset
    base_next = greedy_base(policy, field, schedule, dataset.obs_next)
    for step in range(1, cfg.total_updates + 1):
        batch = draw_batch(dataset, cfg.batch_size, batch_rng)
        c_losses.append(critic_update(critics, policy, field, batch, cfg, schedule, critic_opts, noise_rng,
                                      spec.action_bound, base_next[batch.index]))
        if step % cfg.policy_delay == 0:
            loss, grads, _ = actor_loss(policy, critics, field, schedule, batch.obs, batch.a_r, cfg.bc_weight,
                                        spec.action_bound, cfg.a0_grad)
            actor_opt.step(grads[:-2])
            a_losses.append(loss)
            base_next = greedy_base(policy, field, schedule, dataset.obs_next)
        if step % cfg.eval_every == 0 or step == cfg.total_updates:
            ev = evaluate_policy(spec, policy, field, schedule, cfg.eval_episodes, seed, tag=f"select-{step}",
                                 deterministic=True)
            if ev.success_rate > best_success:
                best_success, best_policy = ev.success_rate, policy.copy()
            row = {
                "iteration": step,
                "env_steps": 0,
                "success_rate": ev.success_rate,
                "mean_return": ev.mean_return,
                "policy_loss": float(np.mean(a_losses)) if a_losses else float("nan"),
                "value_loss": float(np.mean(c_losses)),
                "mean_ratio": float("nan"),
            }
            c_losses, a_losses = [], []
            metrics.append(row)
            if callback is not None:
                callback(row)
    if field.param_hash() != frozen:
        raise RuntimeError("base velocity field changed during offline training")
    final = evaluate_policy(spec, best_policy, field, schedule, cfg.final_eval_episodes, seed, tag="final",
                            deterministic=True)
    return OfflineResult(policy, best_policy, critics, metrics, final.success_rate)


def residual_mse(policy: ModulationPolicy, dataset: OfflineDataset) -> float:
    """Mean squared error of the greedy residual head in units of the bound."""
    _, a_r = policy.deterministic(dataset.obs)
    diff = (a_r - dataset.a_r) / policy.residual_bound
    return float(np.mean(np.sum(diff * diff, axis=1)))
