"""Generative feature matching with moving-average moment tracking."""

from .ama import AMAState, MAState, adam_transform, ama_update, ma_update, surrogate_generator_loss
from .errors import (
    ConfigError,
    ConvergenceError,
    DivergenceError,
    FingerprintMismatch,
    FormatError,
    GFMNError,
    NonScalarLossError,
    ShapeError,
)
from .metrics import GaussianStats, frechet_distance, lap1_loss, mmd_kphi, run_regret
from .moments import MomentStats, batch_stats, full_loss, precompute_stats
from .nets import EncoderConfig, GeneratorConfig, IdentityExtractor, build_encoder, build_generator
from .tensor import Tensor, backward, grad_check
from .trainer import TrainConfig, layer_ablation, sample, train

__all__ = [
    "AMAState",
    "MAState",
    "adam_transform",
    "ama_update",
    "ma_update",
    "surrogate_generator_loss",
    "ConfigError",
    "ConvergenceError",
    "DivergenceError",
    "FingerprintMismatch",
    "FormatError",
    "GFMNError",
    "NonScalarLossError",
    "ShapeError",
    "GaussianStats",
    "frechet_distance",
    "lap1_loss",
    "mmd_kphi",
    "run_regret",
    "MomentStats",
    "batch_stats",
    "full_loss",
    "precompute_stats",
    "EncoderConfig",
    "GeneratorConfig",
    "IdentityExtractor",
    "build_encoder",
    "build_generator",
    "Tensor",
    "backward",
    "grad_check",
    "TrainConfig",
    "layer_ablation",
    "sample",
    "train",
]

__version__ = "0.1.0"
