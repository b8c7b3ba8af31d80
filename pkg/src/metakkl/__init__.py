"""Learning-based KKL observers with meta-learned online adaptation."""

from . import adapt, autodiff, checkpoint, config, data, evaluation, nn, observer, sim, train

__all__ = [
    "adapt",
    "autodiff",
    "checkpoint",
    "config",
    "data",
    "evaluation",
    "nn",
    "observer",
    "sim",
    "train",
]

__version__ = "0.1.0"
