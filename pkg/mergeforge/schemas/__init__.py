"""
Schemas package initialization.

Pydantic models for configuration, cost-model inputs and outputs, and the
report records written by the benchmark and returned by the API.
"""

from mergeforge.schemas.config import (
    ExperimentConfig,
    SuiteConfig,
    TrainingConfig,
    MethodsConfig,
    MergeHyperParams,
    FitConfig,
    HierarchicalConfig,
    CostConfig,
    OptimizerConfig,
    OptimizerKind,
    LossWeighting,
    TrimScope,
    ALL_METHODS,
    MERGING_METHODS,
    REFERENCE_METHODS,
)
from mergeforge.schemas.cost import (
    CostInput,
    CostRow,
    CostTable,
    FlopsMode,
    FlopsRequest,
    FlopsResponse,
    MemoryBreakdown,
    PeakModelsMeasurement,
)
from mergeforge.schemas.report import LayerStats, CurvePoint, MethodReport, NodeReport, TraceEvent
from mergeforge.schemas.checkpoint import (
    ArtifactKind,
    CheckpointHeader,
    CheckpointSummary,
    DTypeCode,
    LayerEntry,
)

__all__ = [
    "ExperimentConfig",
    "SuiteConfig",
    "TrainingConfig",
    "MethodsConfig",
    "MergeHyperParams",
    "FitConfig",
    "HierarchicalConfig",
    "CostConfig",
    "OptimizerConfig",
    "OptimizerKind",
    "LossWeighting",
    "TrimScope",
    "ALL_METHODS",
    "MERGING_METHODS",
    "REFERENCE_METHODS",
    "CostInput",
    "CostRow",
    "CostTable",
    "FlopsMode",
    "FlopsRequest",
    "FlopsResponse",
    "MemoryBreakdown",
    "PeakModelsMeasurement",
    "LayerStats",
    "CurvePoint",
    "MethodReport",
    "NodeReport",
    "TraceEvent",
    "ArtifactKind",
    "CheckpointHeader",
    "CheckpointSummary",
    "DTypeCode",
    "LayerEntry",
]
