"""Residual flow steering: latent steering plus bounded residuals on a frozen flow-matching policy."""

from .envs import ENV_NAMES, EnvSpec, make_env
from .flowpolicy import DemoSet, IntegrationSchedule, VelocityField, denoise, fm_loss, sample_action, train_fm
from .modulation import Mode, ModulationPolicy, compose, logp_of, modulate, residual_from_correction
from .rl_offline import CriticVariant, OfflineDataset, TD3BCConfig, collect_offline, train_offline
from .rl_online import PPOConfig, train_online

__version__ = "0.1.0"

__all__ = [
    "ENV_NAMES", "EnvSpec", "make_env", "DemoSet", "IntegrationSchedule", "VelocityField", "denoise", "fm_loss",
    "sample_action", "train_fm", "Mode", "ModulationPolicy", "compose", "logp_of", "modulate",
    "residual_from_correction", "CriticVariant", "OfflineDataset", "TD3BCConfig", "collect_offline", "train_offline",
    "PPOConfig", "train_online",
]
