"""Forecasting multivariate series with entirely missing variables.

Uncertainty-weighted imputation, Gaussian-kernel dual-graph convolution and a
bidirectional recurrent encoder, built on a small reverse-mode autodiff core.
"""

from .autodiff import Tape, Var
from .data import SeriesSet, generate_synthetic, prepare_dataset
from .graph import build_predefined
from .recurrent import ForecastModel, ModelConfig, ibn_forward
from .training import TrainConfig, evaluate, train

__all__ = [
    "ForecastModel",
    "ModelConfig",
    "SeriesSet",
    "Tape",
    "TrainConfig",
    "Var",
    "build_predefined",
    "evaluate",
    "generate_synthetic",
    "ibn_forward",
    "prepare_dataset",
    "train",
]
__version__ = "0.1.0"
