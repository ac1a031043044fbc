"""YAML experiment configuration.

A config names an environment (plus optional geometry overrides) and the
settings of every pipeline stage. :meth:`ExperimentConfig.to_dict` is fully
resolved, so the snapshot stored in a run directory reproduces the run on its
own.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..envs import EnvSpec, make_env
from ..modulation import Mode
from ..rl_offline import CriticVariant, TD3BCConfig
from ..rl_online import PPOConfig

METHODS = tuple(m.value for m in Mode)


@dataclass
class FMSettings:
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    steps: int = 20000
    batch_size: int = 256
    demo_episodes: int = 400
    chunk_len: int = 1
    integration_steps: int = 8
    log_every: int = 500

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.chunk_len < 1 or self.integration_steps < 1:
            raise ValueError("chunk_len and integration_steps must be positive")


@dataclass
class ReproSettings:
    envs: tuple[str, ...] = ("OffsetReach", "ModalReach", "ModalOffsetReach")
    methods: tuple[str, ...] = METHODS
    # per-env overrides of the online budget, e.g. {"ModalReach": {"iterations": 800}}
    ppo_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.envs = tuple(self.envs)
        self.methods = tuple(Mode.parse(m).value for m in self.methods)


@dataclass
class ExperimentConfig:
    env: EnvSpec = field(default_factory=lambda: make_env("ModalOffsetReach"))
    fm: FMSettings = field(default_factory=FMSettings)
    method: str = "rfs"
    ppo: PPOConfig = field(default_factory=PPOConfig)
    td3bc: TD3BCConfig = field(default_factory=TD3BCConfig)
    offline_episodes: int = 50
    seeds: tuple[int, ...] = (0,)
    output_dir: str | None = None
    eval_episodes: int = 200
    repro: ReproSettings = field(default_factory=ReproSettings)

    def __post_init__(self):
        self.method = Mode.parse(self.method).value
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("at least one seed is required")
        # one evaluation protocol everywhere, so `eval` reproduces training summaries
        self.ppo.final_eval_episodes = self.eval_episodes
        self.td3bc.final_eval_episodes = self.eval_episodes

    @property
    def seed(self) -> int:
        return self.seeds[0]

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "fm": _plain(asdict(self.fm)),
            "method": self.method,
            "ppo": self.ppo.to_dict(),
            "td3bc": self.td3bc.to_dict(),
            "offline_episodes": self.offline_episodes,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "eval_episodes": self.eval_episodes,
            "repro": _plain(asdict(self.repro)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw: dict = {}
        if "env" in d:
            kw["env"] = env_from_dict(d["env"])
        if "fm" in d:
            kw["fm"] = _section(FMSettings, d["fm"], "fm")
        if "ppo" in d:
            kw["ppo"] = _section(PPOConfig, d["ppo"], "ppo")
        if "td3bc" in d:
            kw["td3bc"] = _section(TD3BCConfig, d["td3bc"], "td3bc")
        if "repro" in d:
            kw["repro"] = _section(ReproSettings, d["repro"], "repro")
        for k in ("method", "offline_episodes", "seeds", "output_dir", "eval_episodes"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw)

    def with_overrides(self, seed: int | None = None, method: str | None = None,
                       critic: str | None = None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seeds"] = [int(seed)]
        if method is not None:
            d["method"] = Mode.parse(method).value
        if critic is not None:
            d["td3bc"]["critic_variant"] = CriticVariant.parse(critic).value
        return ExperimentConfig.from_dict(d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _section(cls, values, name: str):
    values = dict(values or {})
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**values)


def env_from_dict(d: dict) -> EnvSpec:
    """Defaults of the named task with any listed fields replaced."""
    d = dict(d)
    if "name" not in d:
        raise ValueError("env.name is required")
    base = make_env(d["name"]).to_dict()
    dist = d.pop("disturbance", None)
    base.update(d)
    if dist is not None:
        base["disturbance"] = {**base["disturbance"], **dist}
    return EnvSpec.from_dict(base)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise FileNotFoundError(f"cannot read config {path}: {e.strerror}") from e
    if raw is not None and not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(raw or {})
