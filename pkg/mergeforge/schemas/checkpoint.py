from enum import IntEnum
from typing import Any, Dict, List

from pydantic import BaseModel, Field


class ArtifactKind(IntEnum):
    PARAMS = 1
    TASK_VECTOR = 2
    MERGE_WEIGHTS = 3


class DTypeCode(IntEnum):
    FLOAT32 = 1
    FLOAT64 = 2


class LayerEntry(BaseModel):
    name: str
    dtype: str
    count: int


class CheckpointHeader(BaseModel):
    """Fixed header plus layer table of a checkpoint file, readable without a ModelSpec."""
    magic: str
    version: int
    kind: str
    spec_hash: str = Field(..., description="Hex SHA-256 of the canonical ModelSpec")
    layer_count: int
    metadata: Dict[str, Any] = Field(default_factory=dict)
    layers: List[LayerEntry] = Field(default_factory=list)
    file_size: int = 0


class CheckpointSummary(BaseModel):
    name: str
    kind: str
    layer_count: int
    file_size: int
