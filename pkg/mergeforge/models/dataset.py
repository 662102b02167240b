from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from mergeforge.core.exceptions import DataError, StructuralError
from mergeforge.models.model_spec import ModelSpec


@dataclass(frozen=True, eq=False)
class Examples:
    """
    Labelled examples of one task split.

    `ids` are unique within a task and make split disjointness checkable.
    """
    ids: np.ndarray
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        inputs = np.asarray(self.inputs, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim != 2:
            raise StructuralError("Example inputs must be a 2-D matrix")
        if not (len(ids) == len(labels) == inputs.shape[0]):
            raise StructuralError("ids, inputs and labels disagree on the number of examples")
        for array in (ids, inputs, labels):
            array.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @classmethod
    def empty(cls, input_dim: int) -> "Examples":
        return cls(
            ids=np.zeros(0, dtype=np.int64),
            inputs=np.zeros((0, input_dim), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
        )

    def subset(self, index: np.ndarray) -> "Examples":
        return Examples(ids=self.ids[index], inputs=self.inputs[index], labels=self.labels[index])

    @classmethod
    def concat(cls, parts: Sequence["Examples"]) -> "Examples":
        if not parts:
            raise DataError("Nothing to concatenate")
        return cls(
            ids=np.concatenate([p.ids for p in parts]),
            inputs=np.concatenate([p.inputs for p in parts], axis=0),
            labels=np.concatenate([p.labels for p in parts]),
        )

    def as_batch(self, weights: Optional[np.ndarray] = None) -> "Batch":
        return Batch(inputs=self.inputs, labels=self.labels, weights=weights)


@dataclass(frozen=True, eq=False)
class Batch:
    """Inputs and labels fed to the network; optional per-example loss weights."""
    inputs: np.ndarray
    labels: np.ndarray
    weights: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(np.shape(self.labels)[0])

    def validate(self, spec: ModelSpec) -> None:
        inputs = np.asarray(self.inputs)
        labels = np.asarray(self.labels)
        if inputs.ndim != 2 or inputs.shape[1] != spec.input_dim:
            raise StructuralError(
                f"Batch inputs have shape {inputs.shape}, spec expects (*, {spec.input_dim})"
            )
        if labels.shape != (inputs.shape[0],):
            raise StructuralError("Batch labels must be one class index per input row")
        if inputs.shape[0] < 1:
            raise StructuralError("Batch must hold at least one example")
        if labels.min() < 0 or labels.max() >= spec.num_classes:
            raise StructuralError(f"Batch labels must lie in [0, {spec.num_classes})")
        if self.weights is not None and np.shape(self.weights) != labels.shape:
            raise StructuralError("Batch weights must be one value per example")


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    """Train / validation / test examples of one task."""
    task_name: str
    input_dim: int
    num_classes: int
    train: Examples
    validation: Examples
    test: Examples

    def __post_init__(self):
        for name in ("train", "validation", "test"):
            part: Examples = getattr(self, name)
            if len(part) and part.input_dim != self.input_dim:
                raise StructuralError(f"{self.task_name}.{name} has input_dim {part.input_dim}")
            if len(part) and (part.labels.min() < 0 or part.labels.max() >= self.num_classes):
                raise StructuralError(f"{self.task_name}.{name} has labels outside [0, {self.num_classes})")

        seen = [set(self.train.ids.tolist()), set(self.validation.ids.tolist()), set(self.test.ids.tolist())]
        if (seen[0] & seen[1]) or (seen[0] & seen[2]) or (seen[1] & seen[2]):
            raise DataError(f"Splits of task '{self.task_name}' share example ids")
