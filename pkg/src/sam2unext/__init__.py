"""Dual-resolution dual-encoder binary segmentation at configurable scale,
with a complete segmentation metric suite and a CPU training harness."""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    ConfigurationError,
    DatasetError,
    DegenerateVarianceError,
    GraphStateError,
    TrainingError,
)
from .model import ModelConfig, SAM2UNeXt, build_model, predict, toy_config

__all__ = [
    "CheckpointError",
    "ConfigurationError",
    "DatasetError",
    "DegenerateVarianceError",
    "GraphStateError",
    "ModelConfig",
    "SAM2UNeXt",
    "TrainingError",
    "build_model",
    "predict",
    "toy_config",
]
