"""Encoder-decoder segmentation of myocardial infarct scar with atrous
convolutions, written against numpy with numba kernels."""

from .errors import ConfigurationError, DataError, DomainError, SegError, TrainingDiverged
from .model import CLASS_NAMES, ModelConfig, SegmentationModel, desk_model_config, segment

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ConfigurationError",
    "DataError",
    "DomainError",
    "ModelConfig",
    "SegError",
    "SegmentationModel",
    "TrainingDiverged",
    "desk_model_config",
    "segment",
]
