"""Latent-noise steering plus bounded residuals on top of a frozen flow policy.

Both heads are tanh-squashed Gaussians: ``a0 = c * tanh(u0)`` and
``a_r = eps_r * tanh(u_r)``. Likelihoods are always of ``(a0, a_r)``, never of
the executed action, so the denoiser never needs to be differentiated for PPO.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .diffcore import Mlp
from .flowpolicy import IntegrationSchedule, VelocityField, denoise

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = np.log(2.0 * np.pi)


class Mode(str, enum.Enum):
    RFS = "rfs"
    DSRL_ONLY = "dsrl"
    RESIDUAL_ONLY = "residual"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        for m in cls:
            if value in (m.value, m.name):
                return m
        raise ValueError(f"unknown method {value!r}; expected one of rfs, dsrl, residual")

    @property
    def steers(self) -> bool:
        return self is not Mode.RESIDUAL_ONLY

    @property
    def corrects(self) -> bool:
        return self is not Mode.DSRL_ONLY


class ModulationPolicy:
    """Shared trunk with a latent head and a residual head."""

    def __init__(
        self,
        mode,
        obs_dim: int,
        flat_dim: int,
        hidden=(64, 64),
        a0_scale: float = 3.0,
        residual_bound: float = 0.05,
        init_log_std_a0: float = float(np.log(1.0 / 3.0)),
        init_log_std_ar: float = -0.5,
        rng: np.random.Generator | None = None,
        net: Mlp | None = None,
    ):
        self.mode = Mode.parse(mode)
        self.obs_dim = int(obs_dim)
        self.flat_dim = int(flat_dim)
        self.a0_scale = float(a0_scale)
        self.residual_bound = float(residual_bound)
        self.net = net if net is not None else Mlp([obs_dim, *hidden, 2 * flat_dim], rng=rng, out_scale=0.01)
        self.log_std_a0 = np.full(flat_dim, init_log_std_a0, dtype=np.float32)
        self.log_std_ar = np.full(flat_dim, init_log_std_ar, dtype=np.float32)

    def params(self) -> list[np.ndarray]:
        return self.net.params() + [self.log_std_a0, self.log_std_ar]

    def clamp_log_std(self) -> None:
        np.clip(self.log_std_a0, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std_a0)
        np.clip(self.log_std_ar, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std_ar)

    def copy(self) -> "ModulationPolicy":
        new = ModulationPolicy(self.mode, self.obs_dim, self.flat_dim, a0_scale=self.a0_scale,
                               residual_bound=self.residual_bound, net=self.net.copy())
        new.log_std_a0 = self.log_std_a0.copy()
        new.log_std_ar = self.log_std_ar.copy()
        return new

    def means(self, obs) -> tuple[np.ndarray, np.ndarray]:
        out = self.net.forward(obs)
        d = self.flat_dim
        return out[..., :d], out[..., d:]

    def deterministic(self, obs) -> tuple[np.ndarray, np.ndarray]:
        """Squashed means; disabled heads give a zero latent / zero residual."""
        mu0, mur = self.means(obs)
        a0 = self.a0_scale * np.tanh(mu0) if self.mode.steers else np.zeros_like(mu0)
        ar = self.residual_bound * np.tanh(mur) if self.mode.corrects else np.zeros_like(mur)
        return a0, ar

    def sample(self, obs, rng_a0: np.random.Generator, rng_ar: np.random.Generator | None = None):
        """Draw pre-squash latents ``(u0, u_r)`` and the squashed ``(a0, a_r)``.

        Disabled heads: RESIDUAL_ONLY takes ``a0 ~ N(0, I)`` from ``rng_a0``;
        DSRL_ONLY returns a zero residual. The standard normal draw for the
        latent always comes first from ``rng_a0`` so base and modulated
        rollouts can share noise.
        """
        rng_ar = rng_ar if rng_ar is not None else rng_a0
        mu0, mur = self.means(obs)
        z0 = rng_a0.standard_normal(mu0.shape)
        if self.mode.steers:
            u0 = mu0 + np.exp(self.log_std_a0.astype(np.float64)) * z0
            a0 = self.a0_scale * np.tanh(u0)
        else:
            u0 = np.zeros_like(mu0)
            a0 = z0
        if self.mode.corrects:
            ur = mur + np.exp(self.log_std_ar.astype(np.float64)) * rng_ar.standard_normal(mur.shape)
            ar = self.residual_bound * np.tanh(ur)
        else:
            ur = np.zeros_like(mur)
            ar = np.zeros_like(mur)
        if not (np.all(np.isfinite(a0)) and np.all(np.isfinite(ar))):
            raise FloatingPointError("non-finite modulation sample")
        return u0, ur, a0, ar

    def gaussian_logp(self, obs, u0, ur):
        """Log-density of the pre-squash latents (active heads only)."""
        mu0, mur = self.means(obs)
        return self._gaussian_logp(mu0, mur, u0, ur)

    def _gaussian_logp(self, mu0, mur, u0, ur):
        total = 0.0
        if self.mode.steers:
            total = total + _normal_logp(u0, mu0, self.log_std_a0)
        if self.mode.corrects:
            total = total + _normal_logp(ur, mur, self.log_std_ar)
        return total


def _normal_logp(x, mu, log_std):
    log_std = np.asarray(log_std, dtype=np.float64)
    z = (x - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def _squash_log_jacobian(u, scale):
    # log |d(scale * tanh u)/du|, written stably
    return np.sum(np.log(scale) + 2.0 * (np.log(2.0) - u - np.logaddexp(0.0, -2.0 * u)), axis=-1)


def logp_of(policy: ModulationPolicy, observation, a0, a_r) -> float | np.ndarray:
    """Exact log-density of squashed samples ``(a0, a_r)`` including the Jacobian."""
    mu0, mur = policy.means(observation)
    total = 0.0
    if policy.mode.steers:
        y = np.asarray(a0, dtype=np.float64) / policy.a0_scale
        if np.any(np.abs(y) >= 1.0):
            raise ValueError("a0 lies on or outside its bound")
        u = np.arctanh(y)
        total = total + _normal_logp(u, mu0, policy.log_std_a0) - _squash_log_jacobian(u, policy.a0_scale)
    if policy.mode.corrects:
        y = np.asarray(a_r, dtype=np.float64) / policy.residual_bound
        if np.any(np.abs(y) >= 1.0):
            raise ValueError("a_r lies on or outside its bound")
        u = np.arctanh(y)
        total = total + _normal_logp(u, mur, policy.log_std_ar) - _squash_log_jacobian(u, policy.residual_bound)
    return total


def compose(a_b, a_r) -> np.ndarray:
    a_b = np.asarray(a_b, dtype=np.float64)
    a_r = np.asarray(a_r, dtype=np.float64)
    if a_b.shape != a_r.shape:
        raise ValueError(f"length mismatch: {a_b.shape} vs {a_r.shape}")
    return a_b + a_r


def residual_from_correction(a_human, a_b) -> np.ndarray:
    a_human = np.asarray(a_human, dtype=np.float64)
    a_b = np.asarray(a_b, dtype=np.float64)
    if a_human.shape != a_b.shape:
        raise ValueError(f"length mismatch: {a_human.shape} vs {a_b.shape}")
    return a_human - a_b


@dataclass
class ModulatedAction:
    a0: np.ndarray
    a_r: np.ndarray
    a_b: np.ndarray
    a: np.ndarray
    logp: float | np.ndarray
    u0: np.ndarray
    u_r: np.ndarray


def modulate(policy: ModulationPolicy, field: VelocityField, observation, schedule: IntegrationSchedule,
             rng_a0: np.random.Generator, rng_ar: np.random.Generator | None = None) -> ModulatedAction:
    if np.shape(observation)[-1] != policy.obs_dim or field.flat_dim != policy.flat_dim:
        raise ValueError("policy, field and observation dimensions disagree")
    u0, ur, a0, ar = policy.sample(observation, rng_a0, rng_ar)
    mu0, mur = policy.means(observation)
    logp = policy._gaussian_logp(mu0, mur, u0, ur)
    if policy.mode.steers:
        logp = logp - _squash_log_jacobian(u0, policy.a0_scale)
    if policy.mode.corrects:
        logp = logp - _squash_log_jacobian(ur, policy.residual_bound)
    a_b = denoise(field, observation, a0, schedule)
    return ModulatedAction(a0=a0, a_r=ar, a_b=a_b, a=compose(a_b, ar), logp=logp, u0=u0, u_r=ur)
