"""Hierarchical VAE with a diffusion-based VampPrior over DCT pseudoinputs."""
from .config import ConfigError, load_config, parse_config
from .model import DVPVAE, ElboReport, ModelConfig
from .tensor_core import DimensionError, Rng, UsageError
from .trainer import TrainConfig, TrainingFault, fit

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DVPVAE",
    "DimensionError",
    "ElboReport",
    "ModelConfig",
    "Rng",
    "TrainConfig",
    "TrainingFault",
    "UsageError",
    "fit",
    "load_config",
    "parse_config",
]
