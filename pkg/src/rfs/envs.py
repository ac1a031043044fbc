"""Point-mass reaching tasks with scripted experts and correctors.

Three layouts separate what latent steering and residual correction can do:

* ``OffsetReach`` -- one goal; reward sits at ``goal + offset`` while demos
  stop at the goal itself, so only off-manifold (residual) motion scores.
* ``ModalReach`` -- two goals, demos split between them, only one pays.
  Picking the mode is global; residuals are too weak to reverse the base.
* ``ModalOffsetReach`` -- both at once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .flowpolicy import DemoSet

ENV_NAMES = ("OffsetReach", "ModalReach", "ModalOffsetReach")


@dataclass(frozen=True)
class Disturbance:
    enabled: bool = True
    interval_range: tuple[int, int] = (2, 5)
    magnitude: float = 0.02


@dataclass(frozen=True)
class EnvSpec:
    name: str = "ModalOffsetReach"
    goal_centers: tuple[tuple[float, float], ...] = ((-0.5, 0.0), (0.5, 0.0))
    rewarded_goal_index: int = 1
    reward_offset: tuple[float, float] = (0.0, 0.12)
    success_radius: float = 0.05
    action_bound: float = 0.15
    horizon: int = 40
    demo_noise_std: float = 0.002
    disturbance: Disturbance = field(default_factory=Disturbance)
    start_box: tuple[float, float] = (-0.02, 0.02)
    success_bonus: float = 10.0
    expert_gain: float = 0.2
    residual_bound: float = 0.02
    corrector_gain: float = 1.0

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ValueError(f"unknown env {self.name!r}")
        if not 0 <= self.rewarded_goal_index < len(self.goal_centers):
            raise ValueError("rewarded_goal_index out of range")

    @property
    def target(self) -> np.ndarray:
        return np.asarray(self.goal_centers[self.rewarded_goal_index], float) + np.asarray(self.reward_offset, float)

    @property
    def obs_dim(self) -> int:
        return 2 + 2 * len(self.goal_centers) + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["goal_centers"] = [list(g) for g in self.goal_centers]
        d["reward_offset"] = list(self.reward_offset)
        d["start_box"] = list(self.start_box)
        d["disturbance"]["interval_range"] = list(self.disturbance.interval_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        d = dict(d)
        dist = d.pop("disturbance", None)
        kw = {}
        if dist is not None:
            dist = dict(dist)
            if "interval_range" in dist:
                dist["interval_range"] = tuple(dist["interval_range"])
            kw["disturbance"] = Disturbance(**dist)
        if "goal_centers" in d:
            d["goal_centers"] = tuple(tuple(float(x) for x in g) for g in d["goal_centers"])
        for k in ("reward_offset", "start_box"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d, **kw)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def geometry_violations(self) -> list[str]:
        """Separation conditions that make the ablations fail by construction."""
        problems = []
        offset = float(np.linalg.norm(self.reward_offset))
        gain = self.expert_gain
        if self.name in ("OffsetReach", "ModalOffsetReach"):
            if not self.success_radius < offset:
                problems.append("reward region contains the demo endpoint")
            # with a proportional base, a constant residual r settles at goal + r/gain
            if offset - self.success_radius >= self.residual_bound / gain:
                problems.append("reward region unreachable with bounded residuals")
            # a latent pinned at 3 sigma biases the base by about 3 * demo noise
            if 3.0 * self.demo_noise_std / gain >= offset - self.success_radius:
                problems.append("reward region reachable by latent steering alone")
        if self.name in ("ModalReach", "ModalOffsetReach"):
            g = np.asarray(self.goal_centers, float)
            if len(g) < 2:
                problems.append("modal task needs at least two goals")
            else:
                # the base leaves the start faster than a residual can push back,
                # so the mode drawn at the first step stays committed
                dist = np.linalg.norm(g, axis=1)
                dirs = g / dist[:, None]
                speed = np.minimum(self.action_bound, gain * dist)
                if np.min(np.abs(dirs[:, 0]) * speed) <= self.residual_bound:
                    problems.append("residual can cancel the base policy's mode commitment")
        return problems


def make_env(name: str, **overrides) -> EnvSpec:
    """Default geometry for each task."""
    if name == "OffsetReach":
        spec = EnvSpec(name=name, goal_centers=((0.5, 0.0),), rewarded_goal_index=0)
    elif name == "ModalReach":
        spec = EnvSpec(name=name, reward_offset=(0.0, 0.0))
    elif name == "ModalOffsetReach":
        spec = EnvSpec(name=name)
    else:
        raise ValueError(f"unknown env {name!r}")
    return replace(spec, **overrides) if overrides else spec


@dataclass
class EnvState:
    position: np.ndarray
    step_index: int = 0
    steps_since_disturbance: int = 0
    next_disturbance: int = 0
    done: bool = False
    success: bool = False


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    success: bool = False


def _draw_interval(spec: EnvSpec, rng) -> int:
    lo, hi = spec.disturbance.interval_range
    return int(rng.integers(lo, hi + 1)) if rng is not None else lo


def env_reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    lo, hi = spec.start_box
    pos = rng.uniform(lo, hi, size=2) if hi > lo else np.full(2, float(lo))
    return EnvState(position=pos, next_disturbance=_draw_interval(spec, rng))


def observe(spec: EnvSpec, state: EnvState) -> np.ndarray:
    goals = np.asarray(spec.goal_centers, float).reshape(-1)
    return np.concatenate([state.position, goals, [state.step_index / spec.horizon]])


def env_step(spec: EnvSpec, state: EnvState, action, rng: np.random.Generator | None = None):
    """Advance one step. Returns ``(next_state, transition)``; ``state`` is not mutated.

    ``rng`` drives the disturbance schedule; without it disturbances are off.
    """
    if state.done:
        raise RuntimeError("cannot step a terminal state")
    a = np.clip(np.asarray(action, dtype=np.float64), -spec.action_bound, spec.action_bound)
    if a.shape != (2,):
        raise ValueError(f"action must have length 2, got shape {a.shape}")
    obs = observe(spec, state)
    pos = state.position + a
    since = state.steps_since_disturbance + 1
    nxt = state.next_disturbance
    if spec.disturbance.enabled and rng is not None and since >= nxt:
        angle = rng.uniform(0.0, 2.0 * np.pi)
        pos = pos + spec.disturbance.magnitude * np.array([np.cos(angle), np.sin(angle)])
        since = 0
        nxt = _draw_interval(spec, rng)
    dist = float(np.linalg.norm(pos - spec.target))
    success = dist < spec.success_radius
    reward = -dist + (spec.success_bonus if success else 0.0)
    step_index = state.step_index + 1
    done = success or step_index >= spec.horizon
    new_state = EnvState(pos, step_index, since, nxt, done, success)
    return new_state, Transition(obs, a, reward, observe(spec, new_state), done, success)


# ------------------------------------------------------------- scripted agents


def greedy_action(position, goal, speed_cap: float, gain: float = 1.0) -> np.ndarray:
    """Move toward ``goal`` at ``min(speed_cap, gain * distance)``."""
    delta = np.asarray(goal, float) - np.asarray(position, float)
    dist = float(np.linalg.norm(delta))
    if dist == 0.0:
        return np.zeros(2)
    return delta / dist * min(speed_cap, gain * dist)


def pick_mode(spec: EnvSpec, rng: np.random.Generator) -> int:
    return int(rng.integers(0, len(spec.goal_centers)))


def scripted_expert(spec: EnvSpec, state: EnvState, rng: np.random.Generator, mode: int = 0) -> np.ndarray:
    """Demonstrator action toward ``goal_centers[mode]`` (never the offset target)."""
    a = greedy_action(state.position, spec.goal_centers[mode], spec.action_bound, spec.expert_gain)
    if spec.demo_noise_std > 0:
        a = a + spec.demo_noise_std * rng.standard_normal(2)
    return a


def generate_demos(spec: EnvSpec, n_episodes: int = 400, rng: np.random.Generator | None = None,
                   chunk_len: int = 1, disturbances: bool = True) -> DemoSet:
    """Roll the expert for the full horizon; each record pairs an observation
    with the next ``chunk_len`` expert actions (zero-padded past the horizon).

    External disturbances are an RL-time perturbation and stay off here
    unless ``disturbances`` is set.
    """
    if n_episodes <= 0:
        raise ValueError("n_episodes must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    if not disturbances:
        spec = replace(spec, disturbance=replace(spec.disturbance, enabled=False))
    states, actions = [], []
    for _ in range(n_episodes):
        st = env_reset(spec, rng)
        mode = pick_mode(spec, rng)
        obs_ep, act_ep = [], []
        for _t in range(spec.horizon):
            a = scripted_expert(spec, st, rng, mode)
            obs_ep.append(observe(spec, st))
            act_ep.append(np.clip(a, -spec.action_bound, spec.action_bound))
            # demos ignore the reward region: they stop only at the horizon
            st = replace(st, done=False)
            st, _ = env_step(spec, st, a, rng)
        act_ep = np.asarray(act_ep)
        padded = np.concatenate([act_ep, np.zeros((chunk_len - 1, 2))])
        for t, o in enumerate(obs_ep):
            states.append(o)
            actions.append(padded[t : t + chunk_len].reshape(-1))
    return DemoSet(np.asarray(states), np.asarray(actions))


def scripted_corrector(spec: EnvSpec, state: EnvState, a_b) -> np.ndarray:
    """Bounded correction of ``a_b`` toward the rewarded target."""
    a_b = np.asarray(a_b, dtype=np.float64)
    ideal = greedy_action(state.position, spec.target, spec.action_bound)
    delta = np.clip(spec.corrector_gain * (ideal - a_b), -spec.residual_bound, spec.residual_bound)
    return a_b + delta
