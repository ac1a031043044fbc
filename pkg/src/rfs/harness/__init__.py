"""Configuration, persistence, orchestration and the command line."""

from .checkpoint import (CheckpointError, HashError, KindError, MagicError, VersionError, load_checkpoint,
                         save_checkpoint)
from .cli import main
from .config import ExperimentConfig, FMSettings, ReproSettings, load_config

__all__ = [
    "CheckpointError", "HashError", "KindError", "MagicError", "VersionError", "load_checkpoint", "save_checkpoint",
    "main", "ExperimentConfig", "FMSettings", "ReproSettings", "load_config",
]
