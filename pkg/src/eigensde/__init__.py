"""
eigensde
========

Continuous-time forecasting of irregularly sampled, partially observed
multivariate series. Latent dynamics are piecewise-linear SDEs written in
a real Jordan eigenbasis, so transitions, control integrals and noise
integrals are closed forms; a hypernetwork maps each sequence's context
(and, periodically, its current belief) to the regime parameters.
"""

from .datasets import Dataset, Trajectory, read_dataset, read_trajectory, split_dataset, write_dataset
from .errors import (
    ConfigError,
    DataError,
    EigenSDEError,
    NumericError,
    SingularBasisError,
    SingularInnovationError,
)
from .esde import ControlSegment, GaussianBelief, predict_observable, propagate, transition
from .filtering import Observation, condition
from .nets import HeadConfig, HyperModel, load_checkpoint, save_checkpoint
from .spectral import EigenBasis, SpectralDynamics, Spectrum, decompose, dynamics_matrix
from .synthdata import PRESETS, generate_preset
from .train import TrainConfig, evaluate, oracle_model, train, unroll

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ControlSegment",
    "DataError",
    "Dataset",
    "EigenBasis",
    "EigenSDEError",
    "GaussianBelief",
    "HeadConfig",
    "HyperModel",
    "NumericError",
    "Observation",
    "PRESETS",
    "SingularBasisError",
    "SingularInnovationError",
    "SpectralDynamics",
    "Spectrum",
    "TrainConfig",
    "Trajectory",
    "condition",
    "decompose",
    "dynamics_matrix",
    "evaluate",
    "generate_preset",
    "load_checkpoint",
    "oracle_model",
    "predict_observable",
    "propagate",
    "read_dataset",
    "read_trajectory",
    "save_checkpoint",
    "split_dataset",
    "train",
    "transition",
    "unroll",
    "write_dataset",
]
