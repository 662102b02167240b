"""
Models package initialization.

Domain entities shared by all services: the network architecture, parameter
and task-vector containers, merge weights, datasets and merge plans.
"""

from mergeforge.models.model_spec import ModelSpec, LayerDescriptor, LayerKind, Activation
from mergeforge.models.parameters import (
    Layer,
    ParameterSet,
    TaskVector,
    MergeWeights,
    IntermediateModel,
)
from mergeforge.models.dataset import Examples, Batch, DatasetSplit
from mergeforge.models.plan import PlanNode, MergePlan

__all__ = [
    "ModelSpec",
    "LayerDescriptor",
    "LayerKind",
    "Activation",
    "Layer",
    "ParameterSet",
    "TaskVector",
    "MergeWeights",
    "IntermediateModel",
    "Examples",
    "Batch",
    "DatasetSplit",
    "PlanNode",
    "MergePlan",
]
