import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from mergeforge.core.exceptions import ConfigError, DataError, StructuralError
from mergeforge.models.dataset import Examples
from mergeforge.models.model_spec import ModelSpec
from mergeforge.models.parameters import ParameterSet, TaskVector
from mergeforge.schemas.config import MergeHyperParams, TrimScope
from mergeforge.schemas.report import CurvePoint
from mergeforge.services.nn_service import NNService
from mergeforge.services.task_vector_service import TaskVectorService
from mergeforge.utils.rng import keyed_generator
from mergeforge.utils.tables import TableFormatter

logger = logging.getLogger(__name__)

GRID_METHODS = ("task_arithmetic", "dare_ta", "ties", "dare_ties")


def _require_vectors(pretrained: ParameterSet, task_vectors: Sequence[TaskVector]) -> None:
    if not task_vectors:
        raise StructuralError("At least one task vector is required")
    for task_vector in task_vectors:
        pretrained.require_congruent(task_vector)


def _check_drop_prob(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"DARE drop probability must lie in [0, 1), got {p}")


def _check_density(density: float) -> None:
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"TIES density must lie in (0, 1], got {density}")


def _top_magnitude_mask(values: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density * n) largest |values|; equal magnitudes resolve by position."""
    n = values.size
    keep = min(n, math.ceil(density * n - 1e-9))
    mask = np.zeros(n, dtype=bool)
    if keep > 0:
        order = np.argsort(-np.abs(values), kind="stable")
        mask[order[:keep]] = True
    return mask


def _sum_vectors(task_vectors: Sequence[TaskVector], source_task: str) -> TaskVector:
    first = task_vectors[0]
    totals = [np.zeros(layer.values.shape, dtype=np.float64) for layer in first.layers]
    for task_vector in task_vectors:
        for total, layer in zip(totals, task_vector.layers):
            total += layer.values
    return TaskVector.from_layers(first, totals, source_task=source_task)


class MergeService:
    """Non-gradient mergers: Task Arithmetic, DARE, TIES and the lambda grid search."""

    @staticmethod
    def merge_task_arithmetic(
        pretrained: ParameterSet, task_vectors: Sequence[TaskVector], lam: float
    ) -> ParameterSet:
        """theta_p + lam * sum_i tau_i."""
        _require_vectors(pretrained, task_vectors)
        return TaskVectorService.apply(pretrained, _sum_vectors(task_vectors, "task_arithmetic"), lam)

    @staticmethod
    def dare_sparsify(task_vector: TaskVector, p: float, seed: int, task_index: int = 0) -> TaskVector:
        """
        Drop each entry with probability p and rescale survivors by 1 / (1 - p).

        The mask for entry e of layer L is draw e of a Philox stream keyed by
        (seed, task_index, L), so it does not depend on the order of merging.
        """
        _check_drop_prob(p)
        if p == 0.0:
            return task_vector
        scale = 1.0 / (1.0 - p)
        arrays = []
        for layer in task_vector.layers:
            draws = keyed_generator(seed, "dare", task_index, layer.name).random(layer.values.size)
            arrays.append(np.where(draws >= p, layer.values * scale, 0.0))
        return TaskVector.from_layers(task_vector, arrays, source_task=task_vector.source_task)

    @staticmethod
    def merge_dare(
        pretrained: ParameterSet, task_vectors: Sequence[TaskVector], p: float, lam: float, seed: int
    ) -> ParameterSet:
        _require_vectors(pretrained, task_vectors)
        sparse = [MergeService.dare_sparsify(tv, p, seed, index) for index, tv in enumerate(task_vectors)]
        return MergeService.merge_task_arithmetic(pretrained, sparse, lam)

    @staticmethod
    def ties_merge_vector(
        task_vectors: Sequence[TaskVector],
        density: float,
        trim_scope: TrimScope = TrimScope.GLOBAL,
    ) -> TaskVector:
        """
        Trim, elect, disjoint-average.

        Each vector keeps its top ceil(density * len) entries by magnitude
        (over the whole vector or per layer). Per coordinate the surviving
        positives and negatives are averaged separately and the average with
        the larger magnitude wins; equal magnitudes go to the positive side.
        """
        _check_density(density)
        if not task_vectors:
            raise StructuralError("At least one task vector is required")
        first = task_vectors[0]
        for task_vector in task_vectors[1:]:
            first.require_congruent(task_vector)

        sizes = [layer.values.size for layer in first.layers]
        stacked = np.stack([tv.flatten() for tv in task_vectors])
        trimmed = np.zeros_like(stacked)
        for row, values in enumerate(stacked):
            if TrimScope(trim_scope) == TrimScope.GLOBAL:
                mask = _top_magnitude_mask(values, density)
            else:
                mask = np.concatenate([
                    _top_magnitude_mask(segment, density)
                    for segment in np.split(values, np.cumsum(sizes)[:-1])
                ])
            trimmed[row] = np.where(mask, values, 0.0)

        positive = trimmed > 0.0
        negative = trimmed < 0.0
        n_pos = positive.sum(axis=0)
        n_neg = negative.sum(axis=0)
        pos_sum = np.where(positive, trimmed, 0.0).sum(axis=0)
        neg_sum = np.where(negative, trimmed, 0.0).sum(axis=0)
        pos_avg = np.divide(pos_sum, n_pos, out=np.zeros_like(pos_sum), where=n_pos > 0)
        neg_avg = np.divide(neg_sum, n_neg, out=np.zeros_like(neg_sum), where=n_neg > 0)
        merged = np.where(pos_avg >= np.abs(neg_avg), pos_avg, neg_avg)

        return TaskVector.from_layers(first, np.split(merged, np.cumsum(sizes)[:-1]), source_task="ties")

    @staticmethod
    def merge_ties(
        pretrained: ParameterSet,
        task_vectors: Sequence[TaskVector],
        density: float,
        lam: float,
        trim_scope: TrimScope = TrimScope.GLOBAL,
    ) -> ParameterSet:
        _require_vectors(pretrained, task_vectors)
        merged = MergeService.ties_merge_vector(task_vectors, density, trim_scope)
        return TaskVectorService.apply(pretrained, merged, lam)

    @staticmethod
    def combined_delta(
        method: str, task_vectors: Sequence[TaskVector], hp: MergeHyperParams
    ) -> TaskVector:
        """The lambda-independent part of a grid method: the vector that lambda scales."""
        if not task_vectors:
            raise StructuralError("At least one task vector is required")
        if method == "task_arithmetic":
            return _sum_vectors(task_vectors, method)
        if method in ("dare_ta", "dare_ties"):
            task_vectors = [
                MergeService.dare_sparsify(tv, hp.drop_prob, hp.seed, index)
                for index, tv in enumerate(task_vectors)
            ]
            if method == "dare_ta":
                return _sum_vectors(task_vectors, method)
        if method in ("ties", "dare_ties"):
            return MergeService.ties_merge_vector(task_vectors, hp.density, hp.trim_scope)
        raise ConfigError(f"'{method}' is not a lambda-scaled merging method")

    @staticmethod
    def merge(
        method: str, pretrained: ParameterSet, task_vectors: Sequence[TaskVector], hp: MergeHyperParams
    ) -> ParameterSet:
        _require_vectors(pretrained, task_vectors)
        return TaskVectorService.apply(pretrained, MergeService.combined_delta(method, task_vectors, hp), hp.lam)

    @staticmethod
    def mean_validation_accuracy(
        spec: ModelSpec, params: ParameterSet, validation: Mapping[str, Examples]
    ) -> Tuple[float, Dict[str, float]]:
        if not validation:
            raise DataError("No validation data supplied")
        accuracies = {}
        for task, examples in validation.items():
            if len(examples) == 0:
                raise DataError(f"Validation set of task '{task}' is empty")
            accuracies[task] = NNService.evaluate(spec, params, examples)
        return float(np.mean(list(accuracies.values()))), accuracies

    @staticmethod
    def grid_search_lambda(
        method: str,
        grid: Sequence[float],
        pretrained: ParameterSet,
        task_vectors: Sequence[TaskVector],
        validation: Mapping[str, Examples],
        spec: ModelSpec,
        hp: Optional[MergeHyperParams] = None,
    ) -> Tuple[float, List[CurvePoint]]:
        """
        Pick lambda by mean validation accuracy across tasks.

        Returns the best lambda (the smaller one on ties) and one curve point
        per grid entry, in grid order.
        """
        if not grid:
            raise ConfigError("Lambda grid must not be empty")
        if any(not 0.0 <= lam <= 1.0 for lam in grid):
            raise ConfigError("Lambda grid values must lie in [0, 1]")
        _require_vectors(pretrained, task_vectors)
        if not validation:
            raise DataError("No validation data supplied")
        hp = hp or MergeHyperParams()

        delta = MergeService.combined_delta(method, task_vectors, hp)
        curve: List[CurvePoint] = []
        for lam in grid:
            merged = TaskVectorService.apply(pretrained, delta, lam)
            mean_accuracy, accuracies = MergeService.mean_validation_accuracy(spec, merged, validation)
            curve.append(CurvePoint(lam=lam, mean_accuracy=mean_accuracy, accuracies=accuracies))
            logger.debug("%s lambda=%.3f mean validation accuracy %.4f", method, lam, mean_accuracy)

        best_lam = MergeService.select_lambda(curve)
        logger.info("%s grid search picked lambda=%.3f", method, best_lam)
        return best_lam, curve

    @staticmethod
    def select_lambda(curve: Sequence[CurvePoint]) -> float:
        """Argmax of mean accuracy over the curve; the smaller lambda wins ties."""
        if not curve:
            raise ConfigError("Cannot select lambda from an empty curve")
        best = curve[0]
        for point in curve[1:]:
            if point.mean_accuracy > best.mean_accuracy or (
                point.mean_accuracy == best.mean_accuracy and point.lam < best.lam
            ):
                best = point
        return best.lam

    @staticmethod
    def curve_to_csv(curve: Sequence[CurvePoint]) -> str:
        """lambda, mean_accuracy, then one accuracy column per task."""
        tasks = list(curve[0].accuracies) if curve else []
        rows = [
            [TableFormatter.number(point.lam, 3), TableFormatter.number(point.mean_accuracy)]
            + [TableFormatter.number(point.accuracies[task]) for task in tasks]
            for point in curve
        ]
        return TableFormatter.csv_text(["lambda", "mean_accuracy", *tasks], rows)
