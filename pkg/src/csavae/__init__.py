"""Causal-structure-aware VAE for implicit-feedback recommendation."""

from .data import DataError, FormatSpec, RatingRecord, SplitDataset, SyntheticDataset, synthesize
from .estimator import CSAVAE, check_interactions
from .model import (
    CSAVAENet,
    CheckpointVersionError,
    FrozenNoise,
    InterventionSpec,
    LatentBundle,
    ModelCheckpoint,
    NoiseSource,
    ZeroNoise,
)
from .objective import LossBreakdown, LossWeights, TrainingFault
from .training import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "CSAVAE",
    "CSAVAENet",
    "CheckpointVersionError",
    "DataError",
    "FormatSpec",
    "FrozenNoise",
    "InterventionSpec",
    "LatentBundle",
    "LossBreakdown",
    "LossWeights",
    "ModelCheckpoint",
    "NoiseSource",
    "RatingRecord",
    "SplitDataset",
    "SyntheticDataset",
    "TrainConfig",
    "TrainResult",
    "TrainingFault",
    "ZeroNoise",
    "check_interactions",
    "synthesize",
    "train",
    "__version__",
]
