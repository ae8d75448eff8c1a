"""Reward fine-tuning of a small conditional diffusion model across a sequence of reward tasks."""

from .errors import ConfigError, ContractError, DimensionError, NumericError, TrainingError

__version__ = "0.1.0"

__all__ = ["ConfigError", "ContractError", "DimensionError", "NumericError", "TrainingError", "__version__"]
