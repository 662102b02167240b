from dataclasses import dataclass, field
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from mergeforge.core.exceptions import NumericError, StructuralError
from mergeforge.models.model_spec import ModelSpec


class Layer(NamedTuple):
    name: str
    values: np.ndarray


def _frozen(values: np.ndarray, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True).reshape(-1)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LayeredArrays:
    """
    Ordered named flat arrays bound to one ModelSpec.

    Base for ParameterSet and TaskVector. Arrays are stored flat (row-major)
    and read-only.
    """
    spec_id: str
    layers: Tuple[Layer, ...]

    @property
    def names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    @property
    def arrays(self) -> List[np.ndarray]:
        return [layer.values for layer in self.layers]

    @property
    def num_parameters(self) -> int:
        return int(sum(layer.values.size for layer in self.layers))

    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self) -> Iterator[Layer]:
        return iter(self.layers)

    def __getitem__(self, name: str) -> np.ndarray:
        for layer in self.layers:
            if layer.name == name:
                return layer.values
        raise KeyError(name)

    def flatten(self) -> np.ndarray:
        """All layers concatenated in layer order, as float64."""
        if not self.layers:
            return np.zeros(0, dtype=np.float64)
        return np.concatenate([layer.values.astype(np.float64) for layer in self.layers])

    def is_congruent(self, other: "LayeredArrays") -> bool:
        if self.spec_id != other.spec_id or len(self.layers) != len(other.layers):
            return False
        return all(
            a.name == b.name and a.values.shape == b.values.shape
            for a, b in zip(self.layers, other.layers)
        )

    def require_congruent(self, other: "LayeredArrays") -> None:
        if not self.is_congruent(other):
            raise StructuralError(
                f"Layer structure mismatch between spec {self.spec_id[:12]} and {other.spec_id[:12]}"
            )

    def equals(self, other: "LayeredArrays") -> bool:
        """Bitwise equality of names and stored bytes."""
        if not self.is_congruent(other):
            return False
        return all(
            a.values.dtype == b.values.dtype and a.values.tobytes() == b.values.tobytes()
            for a, b in zip(self.layers, other.layers)
        )


def _build_layers(
    spec: ModelSpec, arrays: Sequence[np.ndarray], what: str, dtype=np.float32
) -> Tuple[Layer, ...]:
    if len(arrays) != spec.num_layers:
        raise StructuralError(f"{what} has {len(arrays)} layers, spec expects {spec.num_layers}")

    layers = []
    for descriptor, values in zip(spec.layer_descriptors, arrays):
        flat = _frozen(values, dtype)
        if flat.size != descriptor.num_elements:
            raise StructuralError(
                f"{what} layer '{descriptor.name}' has {flat.size} values, "
                f"expected {descriptor.num_elements}"
            )
        if not np.isfinite(flat).all():
            raise NumericError(f"{what} contains non-finite values", layer=descriptor.name)
        layers.append(Layer(descriptor.name, flat))
    return tuple(layers)


def _layers_like(like: LayeredArrays, arrays: Sequence[np.ndarray], what: str, dtype) -> Tuple[Layer, ...]:
    if len(arrays) != len(like.layers):
        raise StructuralError(f"{what} has {len(arrays)} layers, expected {len(like.layers)}")
    layers = []
    for reference, values in zip(like.layers, arrays):
        flat = _frozen(values, dtype)
        if flat.shape != reference.values.shape:
            raise StructuralError(f"{what} layer '{reference.name}' has the wrong size")
        if not np.isfinite(flat).all():
            raise NumericError(f"{what} contains non-finite values", layer=reference.name)
        layers.append(Layer(reference.name, flat))
    return tuple(layers)


@dataclass(frozen=True, eq=False)
class ParameterSet(LayeredArrays):
    """A model's parameters: one float32 flat array per spec layer."""

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays: Sequence[np.ndarray]) -> "ParameterSet":
        return cls(spec_id=spec.spec_id, layers=_build_layers(spec, arrays, "ParameterSet"))

    @classmethod
    def from_layers(cls, like: LayeredArrays, arrays: Sequence[np.ndarray]) -> "ParameterSet":
        """Bind new values to the layer layout of `like`."""
        return cls(spec_id=like.spec_id, layers=_layers_like(like, arrays, "ParameterSet", np.float32))

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParameterSet":
        return cls.from_arrays(spec, [np.zeros(d.num_elements, dtype=np.float32) for d in spec.layer_descriptors])

    def check_spec(self, spec: ModelSpec) -> None:
        if self.spec_id != spec.spec_id:
            raise StructuralError("ParameterSet was built for a different ModelSpec")


@dataclass(frozen=True, eq=False)
class TaskVector(LayeredArrays):
    """
    Per-layer delta of a fine-tuned model against the pretrained anchor.

    Deltas are held in float64. The difference of two float32 values is exact
    there unless their magnitudes differ by more than 2**29, so adding a delta
    back reproduces the fine-tuned float32 model.
    """
    source_task: str = ""

    @classmethod
    def from_arrays(
        cls, spec: ModelSpec, arrays: Sequence[np.ndarray], source_task: str = ""
    ) -> "TaskVector":
        return cls(
            spec_id=spec.spec_id,
            layers=_build_layers(spec, arrays, "TaskVector", np.float64),
            source_task=source_task,
        )

    @classmethod
    def from_layers(
        cls, like: LayeredArrays, arrays: Sequence[np.ndarray], source_task: str = ""
    ) -> "TaskVector":
        """Reuse the layer names of `like`; values are checked for shape and finiteness."""
        return cls(
            spec_id=like.spec_id,
            layers=_layers_like(like, arrays, "TaskVector", np.float64),
            source_task=source_task,
        )


@dataclass(frozen=True, eq=False)
class MergeWeights:
    """
    k x n trainable merge weights, one raw scalar per (model, layer).

    Raw values are unbounded; only g(w) enters a merge, with g = tanh unless
    the tanh gate is switched off.
    """
    w: np.ndarray
    model_ids: Tuple[str, ...]
    layer_names: Tuple[str, ...]

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64, copy=True)
        if w.shape != (len(self.model_ids), len(self.layer_names)):
            raise StructuralError(
                f"MergeWeights shape {w.shape} does not match "
                f"{len(self.model_ids)} models x {len(self.layer_names)} layers"
            )
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "layer_names", tuple(self.layer_names))

    @classmethod
    def filled(
        cls, model_ids: Sequence[str], layer_names: Sequence[str], value: float = 0.0
    ) -> "MergeWeights":
        return cls(
            w=np.full((len(model_ids), len(layer_names)), value, dtype=np.float64),
            model_ids=tuple(model_ids),
            layer_names=tuple(layer_names),
        )

    @property
    def k(self) -> int:
        return len(self.model_ids)

    @property
    def n(self) -> int:
        return len(self.layer_names)

    @property
    def num_trainable(self) -> int:
        return self.k * self.n

    def coefficients(self, use_tanh: bool = True) -> np.ndarray:
        return np.tanh(self.w) if use_tanh else self.w.copy()

    def with_values(self, w: np.ndarray) -> "MergeWeights":
        return MergeWeights(w=w, model_ids=self.model_ids, layer_names=self.layer_names)

    def equals(self, other: "MergeWeights") -> bool:
        return (
            self.model_ids == other.model_ids
            and self.layer_names == other.layer_names
            and self.w.tobytes() == other.w.tobytes()
        )


@dataclass
class IntermediateModel:
    """A merged model produced at a plan node, anchored to the pretrained model."""
    params: ParameterSet
    covered_tasks: frozenset = field(default_factory=frozenset)
    derived_task_vector: Optional[TaskVector] = None
