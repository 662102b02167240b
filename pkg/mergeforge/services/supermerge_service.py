import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from mergeforge.core.exceptions import DataError, FitError, NumericError, StructuralError
from mergeforge.models.dataset import Batch, Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import MergeWeights, ParameterSet, TaskVector
from mergeforge.schemas.config import FitConfig, LossWeighting
from mergeforge.services.nn_service import LossValue, Network
from mergeforge.services.optimizer import Optimizer, OptimizerState
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.utils.rng import keyed_generator
from mergeforge.utils.tables import TableFormatter

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FitResult:
    weights: MergeWeights
    merged: ParameterSet
    loss_trace: List[float] = field(default_factory=list)
    seed: int = 0
    use_tanh: bool = True

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1]


def _check_inputs(pretrained: ParameterSet, task_vectors: Sequence[TaskVector], weights: MergeWeights) -> None:
    if not task_vectors:
        raise StructuralError("At least one task vector is required")
    for task_vector in task_vectors:
        pretrained.require_congruent(task_vector)
    if weights.k != len(task_vectors):
        raise StructuralError(f"MergeWeights has {weights.k} rows for {len(task_vectors)} task vectors")
    if list(weights.layer_names) != pretrained.names:
        raise StructuralError("MergeWeights columns do not match the parameter layers")


class MergeObjective:
    """
    Validation loss of the merged model as a function of the raw k x n weights.

    theta_m(j) = theta_p(j) + sum_i g(w[i, j]) * tau_i(j), g = tanh or identity.
    Everything stays in float64 so finite differences over w are meaningful.
    """

    def __init__(
        self,
        spec: ModelSpec,
        pretrained: ParameterSet,
        task_vectors: Sequence[TaskVector],
        use_tanh: bool = True,
    ):
        pretrained.check_spec(spec)
        self.network = Network(spec)
        self.use_tanh = use_tanh
        self.base = [layer.values.astype(np.float64) for layer in pretrained.layers]
        self.deltas = [[layer.values for layer in tv.layers] for tv in task_vectors]

    def coefficients(self, w: np.ndarray) -> np.ndarray:
        return np.tanh(w) if self.use_tanh else np.asarray(w, dtype=np.float64)

    def materialize(self, w: np.ndarray) -> List[np.ndarray]:
        coefficients = self.coefficients(w)
        arrays = []
        for j, base in enumerate(self.base):
            merged = base.copy()
            for i, deltas in enumerate(self.deltas):
                merged += coefficients[i, j] * deltas[j]
            arrays.append(merged)
        return arrays

    def loss(self, w: np.ndarray, batch: Batch) -> float:
        value, _ = self.network.loss(self.materialize(w), batch)
        return value.mean_loss

    def loss_and_grad(self, w: np.ndarray, batch: Batch) -> Tuple[LossValue, np.ndarray]:
        """One backward pass through theta_m, then per-layer inner products with each tau."""
        value, grads = self.network.loss_and_grad(self.materialize(w), batch)
        inner = np.array([
            [float(np.dot(grads[j], deltas[j])) for j in range(len(grads))]
            for deltas in self.deltas
        ])
        if self.use_tanh:
            inner *= 1.0 - np.tanh(w) ** 2
        return value, inner


def _union_validation(
    validation: Union[Examples, Mapping[str, Examples]], weighting: LossWeighting
) -> Tuple[Examples, Optional[np.ndarray]]:
    """Concatenate per-task validation sets; per-example weights for task-balanced loss."""
    if isinstance(validation, Examples):
        if len(validation) == 0:
            raise DataError("Validation data is empty")
        return validation, None

    parts = [(task, examples) for task, examples in validation.items() if len(examples) > 0]
    if not parts:
        raise DataError("Validation data is empty")
    union = Examples.concat([examples for _, examples in parts])
    if LossWeighting(weighting) == LossWeighting.EXAMPLES:
        return union, None
    weights = np.concatenate([
        np.full(len(examples), 1.0 / (len(examples) * len(parts))) for _, examples in parts
    ])
    return union, weights


class SuperMergeService:
    """Learned layer-wise merging: one tanh-gated coefficient per (model, layer)."""

    @staticmethod
    def materialize(
        pretrained: ParameterSet,
        task_vectors: Sequence[TaskVector],
        weights: MergeWeights,
        use_tanh: bool = True,
    ) -> ParameterSet:
        _check_inputs(pretrained, task_vectors, weights)
        coefficients = weights.coefficients(use_tanh)
        arrays = []
        for j, base in enumerate(pretrained.layers):
            merged = base.values.astype(np.float64)
            for i, task_vector in enumerate(task_vectors):
                merged = merged + coefficients[i, j] * task_vector.layers[j].values
            arrays.append(merged)
        return ParameterSet.from_layers(pretrained, arrays)

    @staticmethod
    def grad_w(
        pretrained: ParameterSet,
        task_vectors: Sequence[TaskVector],
        weights: MergeWeights,
        batch: Batch,
        spec: ModelSpec,
        use_tanh: bool = True,
    ) -> np.ndarray:
        """d(mean batch loss)/dw as a k x n matrix."""
        _check_inputs(pretrained, task_vectors, weights)
        objective = MergeObjective(spec, pretrained, task_vectors, use_tanh)
        _, grad = objective.loss_and_grad(weights.w, batch)
        return grad

    @staticmethod
    def fit(
        spec: ModelSpec,
        pretrained: ParameterSet,
        fine_tuned: Sequence[ParameterSet],
        validation: Union[Examples, Mapping[str, Examples]],
        cfg: FitConfig,
        model_ids: Optional[Sequence[str]] = None,
        seed: Optional[int] = None,
        label: str = "supermerge",
    ) -> FitResult:
        """
        Learn W on validation data by mini-batch AdamW; theta_p and every tau stay frozen.

        The loss trace holds the full-validation loss at the initial W followed by
        one entry per epoch.
        """
        if not fine_tuned:
            raise StructuralError("At least one fine-tuned model is required")
        pretrained.check_spec(spec)
        if model_ids is None:
            model_ids = [f"model{i}" for i in range(len(fine_tuned))]
        if len(model_ids) != len(fine_tuned):
            raise StructuralError("model_ids must name every fine-tuned model")
        seed = cfg.seed if seed is None else seed

        task_vectors = [
            TaskVectorService.compute_task_vector(params, pretrained, source_task=model_id)
            for params, model_id in zip(fine_tuned, model_ids)
        ]
        union, example_weights = _union_validation(validation, cfg.loss_weighting)
        full_batch = union.as_batch(example_weights)
        full_batch.validate(spec)

        objective = MergeObjective(spec, pretrained, task_vectors, cfg.use_tanh)
        w = np.full((len(task_vectors), spec.num_layers), cfg.init_value, dtype=np.float64)
        optimizer = Optimizer(OptimizerState.from_config(cfg))
        rng = keyed_generator(seed, "supermerge-shuffle")

        def validation_loss(epoch: int) -> float:
            try:
                loss = objective.loss(w, full_batch)
            except NumericError as exc:
                raise FitError(f"Validation loss of '{label}' is not finite ({exc})", epoch) from exc
            return loss

        trace = [validation_loss(0)]
        n = len(union)
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                index = order[start:start + cfg.batch_size]
                batch = Batch(
                    inputs=union.inputs[index],
                    labels=union.labels[index],
                    weights=None if example_weights is None else example_weights[index],
                )
                try:
                    _, grad = objective.loss_and_grad(w, batch)
                except NumericError as exc:
                    raise FitError(f"Fit of '{label}' diverged ({exc})", epoch) from exc
                optimizer.step([w], [grad])
                if not np.isfinite(w).all():
                    raise FitError(f"Merge weights of '{label}' became non-finite", epoch)
            trace.append(validation_loss(epoch))
            logger.info("fit %s epoch %d/%d validation loss=%.6f", label, epoch, cfg.epochs, trace[-1])

        weights = MergeWeights(w=w, model_ids=tuple(model_ids), layer_names=tuple(spec.layer_names))
        try:
            merged = SuperMergeService.materialize(pretrained, task_vectors, weights, cfg.use_tanh)
        except NumericError as exc:
            raise FitError(f"Merged model of '{label}' is not finite ({exc})", cfg.epochs) from exc
        return FitResult(weights=weights, merged=merged, loss_trace=trace, seed=seed, use_tanh=cfg.use_tanh)

    @staticmethod
    def weights_to_csv(weights: MergeWeights, use_tanh: bool = True) -> str:
        """Effective coefficients g(w): one row per model, one column per layer."""
        coefficients = weights.coefficients(use_tanh)
        rows = [
            [model_id] + [TableFormatter.number(value) for value in coefficients[i]]
            for i, model_id in enumerate(weights.model_ids)
        ]
        return TableFormatter.csv_text(["model", *weights.layer_names], rows)

    @staticmethod
    def layer_profile(weights: MergeWeights, use_tanh: bool = True) -> Dict[str, float]:
        """Mean effective coefficient per layer, across models."""
        coefficients = weights.coefficients(use_tanh)
        return {name: float(coefficients[:, j].mean()) for j, name in enumerate(weights.layer_names)}
