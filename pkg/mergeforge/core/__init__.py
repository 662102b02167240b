"""
Core module initialization.

This module provides core functionality for mergeforge including
configuration, logging setup and the shared error hierarchy.
"""

from mergeforge.core.config import settings
from mergeforge.core.logging import configure_logging
from mergeforge.core.exceptions import (
    MergeForgeError,
    StructuralError,
    NumericError,
    TrainingError,
    FitError,
    DataError,
    ConfigError,
    CheckpointError,
)

__all__ = [
    "settings",
    "configure_logging",
    "MergeForgeError",
    "StructuralError",
    "NumericError",
    "TrainingError",
    "FitError",
    "DataError",
    "ConfigError",
    "CheckpointError",
]
