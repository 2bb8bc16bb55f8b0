"""Desk-scale laboratory for class-feature-drop segmentation training."""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DimensionError,
    DropClassError,
    FormatError,
    GenerationError,
    ManifestError,
    NonFiniteError,
    ProtocolError,
    TrainingDiverged,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "DropClassError",
    "FormatError",
    "GenerationError",
    "ManifestError",
    "NonFiniteError",
    "ProtocolError",
    "TrainingDiverged",
    "__version__",
]
