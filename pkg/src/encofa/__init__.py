"""Learning from data with mixed closed-set and open-set label noise.

The pipeline: a cross-entropy warm-up, then every epoch a two-stage triage
of the training set (loss mixture model, then nearest-neighbour OOD scoring)
that routes each sample to observed-label, pseudo-label or random-label
supervision, plus a weighted supervised contrastive term and channel-swap
feature augmentation for samples judged out-of-distribution.
"""
from .config import RunConfig, load_config
from .dataset import DatasetSplits, NoiseSpec, NoiseType, SampleSet, generate_blobs, inject_noise
from .exceptions import ConfigError, DataError, EncofaError, StateError
from .trainer import FitResult, Trainer, fit, load_data

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DatasetSplits", "EncofaError", "FitResult", "NoiseSpec", "NoiseType",
    "RunConfig", "SampleSet", "StateError", "Trainer", "fit", "generate_blobs", "inject_noise",
    "load_config", "load_data",
]
