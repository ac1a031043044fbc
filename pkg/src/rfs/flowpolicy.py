"""Conditional flow-matching policy: training, Euler sampling, demo I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Adam, Mlp


class VelocityField:
    """``v(a_t, t, s)`` realised by an :class:`Mlp` on ``[a_t, t, s]``.

    Actions are handled in units of ``action_scale``: the network, the flow
    time and the latent noise all live in the normalised space, and
    :func:`denoise` rescales its result back to environment units.
    """

    def __init__(
        self,
        action_dim: int,
        state_dim: int,
        chunk_len: int = 1,
        hidden: Sequence[int] = (64, 64),
        action_scale: float = 1.0,
        rng: np.random.Generator | None = None,
        net: Mlp | None = None,
    ):
        self.action_dim = int(action_dim)
        self.chunk_len = int(chunk_len)
        self.state_dim = int(state_dim)
        self.action_scale = float(action_scale)
        d = self.flat_dim
        if net is None:
            net = Mlp([d + 1 + self.state_dim, *hidden, d], rng=rng)
        if net.in_dim != d + 1 + self.state_dim or net.out_dim != d:
            raise ValueError("network dims do not match the velocity field")
        self.net = net
        self.state_mean = np.zeros(self.state_dim)
        self.state_std = np.ones(self.state_dim)

    def fit_state_normalizer(self, states) -> None:
        """Standardise conditioning states by dataset statistics (constant features pass through).

        The statistics are rounded to single precision so checkpoints hold them exactly.
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        std = states.std(axis=0)
        self.state_mean = states.mean(axis=0).astype(np.float32).astype(np.float64)
        self.state_std = np.where(std > 1e-6, std, 1.0).astype(np.float32).astype(np.float64)

    @property
    def flat_dim(self) -> int:
        return self.action_dim * self.chunk_len

    def _inputs(self, a_t, t, s) -> np.ndarray:
        a_t = np.atleast_2d(np.asarray(a_t, dtype=np.float64))
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("flow time must lie in [0, 1]")
        if a_t.shape[1] != self.flat_dim or s.shape[1] != self.state_dim:
            raise ValueError(
                f"expected action length {self.flat_dim} and state length {self.state_dim}, "
                f"got {a_t.shape[1]} and {s.shape[1]}"
            )
        s = (s - self.state_mean) / self.state_std
        n = max(a_t.shape[0], s.shape[0])
        t_col = np.broadcast_to(t.reshape(-1, 1), (n, 1))
        return np.concatenate(
            [np.broadcast_to(a_t, (n, self.flat_dim)), t_col, np.broadcast_to(s, (n, self.state_dim))], axis=1
        )

    def evaluate(self, a_t, t, s) -> np.ndarray:
        single = np.ndim(a_t) == 1 and np.ndim(s) == 1
        out = self.net.forward(self._inputs(a_t, t, s))
        return out[0] if single else out

    def param_hash(self) -> str:
        h = hashlib.sha256(self.net.param_hash().encode())
        h.update(self.state_mean.tobytes())
        h.update(self.state_std.tobytes())
        h.update(np.float64(self.action_scale).tobytes())
        return h.hexdigest()


@dataclass
class IntegrationSchedule:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=np.float64)
        if k.ndim != 1 or k.size < 2 or k[0] != 0.0 or k[-1] != 1.0 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must increase strictly from 0 to 1")
        self.knots = k

    @classmethod
    def uniform(cls, K: int = 8) -> "IntegrationSchedule":
        if K < 1:
            raise ValueError("K must be positive")
        knots = np.arange(K + 1, dtype=np.float64) / K
        return cls(knots)

    @property
    def K(self) -> int:
        return self.knots.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.knots)

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist()}


@dataclass
class DemoSet:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        if self.states.shape[0] != self.actions.shape[0]:
            raise ValueError("states and actions must pair up")
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.actions))):
            raise ValueError("demo values must be finite")

    def __len__(self) -> int:
        return self.states.shape[0]

    @classmethod
    def from_pairs(cls, pairs) -> "DemoSet":
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)))
        return cls(np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            for s, a in zip(self.states, self.actions):
                f.write(json.dumps({"s": s.tolist(), "a": a.tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "DemoSet":
        pairs = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                pairs.append((rec["s"], rec["a"]))
        return cls.from_pairs(pairs)


# ------------------------------------------------------------------ training


def fm_loss(field: VelocityField, states, actions, rng: np.random.Generator | None = None, *, a0=None, t=None):
    """Flow-matching regression loss and its parameter gradients.

    ``actions`` are in environment units and get divided by the field's
    ``action_scale``. ``a0`` and ``t`` may be fixed for testing; otherwise they
    are drawn from ``rng``.
    """
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a = np.atleast_2d(np.asarray(actions, dtype=np.float64)) / field.action_scale
    n = a.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if a0 is None:
        a0 = rng.standard_normal(a.shape)
    if t is None:
        t = rng.uniform(0.0, 1.0, size=n)
    a0 = np.atleast_2d(np.asarray(a0, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    a_t = (1.0 - t)[:, None] * a0 + t[:, None] * a
    target = a - a0
    pred, cache = field.net.forward_cache(field._inputs(a_t, t, s))
    diff = pred - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite flow-matching loss")
    grads, _ = field.net.backward(cache, 2.0 * diff / n)
    return loss, grads


@dataclass
class FMConfig:
    lr: float = 3e-4
    batch_size: int = 256
    steps: int = 2000
    seed: int = 0
    ema: float = 0.98
    normalize_states: bool = True


@dataclass
class FMResult:
    field: VelocityField
    losses: list[float] = field(default_factory=list)


def train_fm(field: VelocityField, demos: DemoSet, config: FMConfig | None = None, rng=None) -> FMResult:
    """Fit ``field`` to ``demos`` with Adam; the field is updated in place."""
    config = config or FMConfig()
    if len(demos) == 0:
        raise ValueError("cannot train on an empty demo set")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if config.normalize_states:
        field.fit_state_normalizer(demos.states)
    opt = Adam(field.net.params(), lr=config.lr)
    losses: list[float] = []
    ema = None
    first = None
    n = len(demos)
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        loss, grads = fm_loss(field, demos.states[idx], demos.actions[idx], rng)
        opt.step(grads)
        losses.append(loss)
        ema = loss if ema is None else config.ema * ema + (1 - config.ema) * loss
        if first is None:
            first = loss
        elif ema > 10.0 * first:
            raise FloatingPointError(f"flow-matching training diverged (ema loss {ema:.3g})")
    return FMResult(field, losses)


# ------------------------------------------------------------------ sampling


def _denoise_norm(field: VelocityField, state, a0, schedule: IntegrationSchedule, trace=None):
    s = np.asarray(state, dtype=np.float64)
    x = np.array(a0, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    s2 = np.atleast_2d(s)
    if x2.shape[1] != field.flat_dim:
        raise ValueError(f"latent length {x2.shape[1]} != {field.flat_dim}")
    for t_k, dt in zip(schedule.knots[:-1], schedule.dt):
        inp = field._inputs(x2, t_k, s2)
        if trace is not None:
            v, cache = field.net.forward_cache(inp)
            trace.append(cache)
        else:
            v = field.net.forward(inp)
        x2 = x2 + dt * v
        if not np.all(np.isfinite(x2)):
            raise FloatingPointError("non-finite value during denoising")
    return x2[0] if single else x2


def denoise(field: VelocityField, state, a0, schedule: IntegrationSchedule) -> np.ndarray:
    """Euler-integrate the field from latent ``a0`` at ``t=0`` to ``t=1``.

    Deterministic; accepts a single state/latent or matching batches.
    """
    return field.action_scale * _denoise_norm(field, state, a0, schedule)


def denoise_with_vjp(field: VelocityField, state, a0, schedule: IntegrationSchedule):
    """Like :func:`denoise` but also returns ``vjp(g) -> dL/da0`` for output cotangent ``g``.

    Field parameters are treated as constants.
    """
    trace: list = []
    x = _denoise_norm(field, state, a0, schedule, trace)
    d = field.flat_dim

    def vjp(g):
        g = np.atleast_2d(np.asarray(g, dtype=np.float64)) * field.action_scale
        for cache, dt in zip(reversed(trace), schedule.dt[::-1]):
            _, gin = field.net.backward(cache, dt * g)
            g = g + gin[:, :d]
        return g

    return field.action_scale * x, vjp


def sample_action(field: VelocityField, state, schedule: IntegrationSchedule, rng: np.random.Generator):
    """Draw ``a0 ~ N(0, I)`` and push it through :func:`denoise`. Returns ``(action, a0)``."""
    n = np.atleast_2d(state).shape[0] if np.ndim(state) > 1 else None
    shape = (field.flat_dim,) if n is None else (n, field.flat_dim)
    a0 = rng.standard_normal(shape)
    return denoise(field, state, a0, schedule), a0
