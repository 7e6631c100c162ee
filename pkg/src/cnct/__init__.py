"""Toolkit for building, training, evaluating, and explaining the
COVIDNet-CT family of chest-CT classifiers at desk scale."""

__version__ = "0.1.0"

from .errors import (
    CheckpointCompatError,
    CheckpointError,
    CheckpointFormatError,
    ConfigError,
    DataError,
    NonFiniteGradientError,
    PreconditionError,
    SamplerError,
    ShapeMismatchError,
    ToolkitError,
)

__all__ = [
    "CheckpointCompatError",
    "CheckpointError",
    "CheckpointFormatError",
    "ConfigError",
    "DataError",
    "NonFiniteGradientError",
    "PreconditionError",
    "SamplerError",
    "ShapeMismatchError",
    "ToolkitError",
    "__version__",
]
