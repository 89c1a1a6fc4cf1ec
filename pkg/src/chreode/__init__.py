"""Gated one-step residual transition operator for snapshot population dynamics."""

from .estimator import ChreodeEstimator, LinearBaseline, Standardizer
from .exceptions import (
    ChreodeError,
    ConfigError,
    DataError,
    DatasetFormatError,
    NumericalError,
    UnsupportedOperationError,
)
from .landscape import Landscape, TrajectoryDataset, simulate_clones, simulate_dataset
from .operator import OperatorConfig, WaddingtonOperator, build_variant
from .trainer import TrainConfig, finetune, train

__version__ = "0.1.0"

__all__ = [
    "ChreodeEstimator",
    "LinearBaseline",
    "Standardizer",
    "ChreodeError",
    "ConfigError",
    "DataError",
    "DatasetFormatError",
    "NumericalError",
    "UnsupportedOperationError",
    "Landscape",
    "TrajectoryDataset",
    "simulate_clones",
    "simulate_dataset",
    "OperatorConfig",
    "WaddingtonOperator",
    "build_variant",
    "TrainConfig",
    "finetune",
    "train",
]
