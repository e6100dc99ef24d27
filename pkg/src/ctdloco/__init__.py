"""Recurrent locomotion policies and their dynamical-systems analysis."""

__version__ = "0.1.0"

from .env import EnvConfig, TeacherGains
from .exceptions import (AnalysisError, ConfigurationError, NumericError,
                         UndefinedPhaseError, WeightFileError)
from .fixed_points import FixedPointFinder, find_fixed_points
from .pca import PCBasis, RecurrentPCA, fit_pca
from .policy import PolicyDims, PolicyNet, load_weights, save_weights
from .trainer import TBPTTImitationTrainer, TrainConfig, train

__all__ = [
    "AnalysisError", "ConfigurationError", "EnvConfig", "FixedPointFinder", "NumericError",
    "PCBasis", "PolicyDims", "PolicyNet", "RecurrentPCA", "TBPTTImitationTrainer",
    "TeacherGains", "TrainConfig", "UndefinedPhaseError", "WeightFileError",
    "find_fixed_points", "fit_pca", "load_weights", "save_weights", "train",
]
