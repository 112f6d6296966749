"""Coarse-to-fine frame interpolation/extrapolation at arbitrary time ratios."""
from .model import Generator, GeneratorConfig, count_parameters, synthesize
from .losses import LossWeights
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__all__ = [
    "Generator",
    "GeneratorConfig",
    "LossWeights",
    "TrainConfig",
    "Trainer",
    "count_parameters",
    "load_checkpoint",
    "save_checkpoint",
    "synthesize",
]
__version__ = "0.1.0"
