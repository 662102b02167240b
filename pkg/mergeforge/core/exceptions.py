"""
Error hierarchy shared by every service.

Services raise these instead of HTTP errors; the API layer and the CLI
translate them (status codes and exit codes respectively).
"""

from typing import Optional


class MergeForgeError(Exception):
    """Base class for all mergeforge errors."""


class StructuralError(MergeForgeError):
    """Shapes, specs or plans that do not line up."""


class NumericError(MergeForgeError):
    """Non-finite values produced while computing a layer."""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer '{layer}')"
        super().__init__(message)


class TrainingError(MergeForgeError):
    """Model training diverged."""

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


class FitError(MergeForgeError):
    """Merge-weight optimization diverged."""

    def __init__(self, message: str, epoch: int, node_path: Optional[str] = None):
        self.reason = message
        self.epoch = epoch
        self.node_path = node_path
        location = f" in node '{node_path}'" if node_path else ""
        super().__init__(f"{message} at epoch {epoch}{location}")

    def at_node(self, node_path: str) -> "FitError":
        return FitError(self.reason, self.epoch, node_path)


class DataError(MergeForgeError):
    """Missing, empty or malformed example data."""


class ConfigError(MergeForgeError):
    """Invalid experiment configuration or CLI arguments."""


class CheckpointError(MergeForgeError):
    """Base class for checkpoint read/write failures."""


class CheckpointNotFoundError(CheckpointError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class SpecHashMismatchError(CheckpointError):
    pass


class ArtifactKindError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    """File ended before the layer at `layer_index` was complete."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"{message} (layer index {layer_index})"
        super().__init__(message)
