import logging
from typing import List, Sequence

import numpy as np

from mergeforge.models.parameters import LayeredArrays, ParameterSet, TaskVector
from mergeforge.schemas.report import LayerStats
from mergeforge.utils.tables import TableFormatter

logger = logging.getLogger(__name__)

STATS_COLUMNS = ("layer", "size", "mean", "std", "min", "q1", "median", "q3", "max")


class TaskVectorService:
    """Task vectors: tau = fine-tuned - pretrained, per named layer."""

    @staticmethod
    def compute_task_vector(
        fine_tuned: ParameterSet, pretrained: ParameterSet, source_task: str = ""
    ) -> TaskVector:
        fine_tuned.require_congruent(pretrained)
        deltas = [
            f.values.astype(np.float64) - p.values.astype(np.float64)
            for f, p in zip(fine_tuned.layers, pretrained.layers)
        ]
        return TaskVector.from_layers(pretrained, deltas, source_task=source_task)

    @staticmethod
    def apply(pretrained: ParameterSet, delta: TaskVector, scale: float = 1.0) -> ParameterSet:
        """theta_p + scale * tau per layer, accumulated in float64."""
        pretrained.require_congruent(delta)
        arrays = [
            p.values.astype(np.float64) + scale * d.values
            for p, d in zip(pretrained.layers, delta.layers)
        ]
        return ParameterSet.from_layers(pretrained, arrays)

    @staticmethod
    def layer_stats(task_vector: LayeredArrays) -> List[LayerStats]:
        """Per-layer distribution summary, in layer order."""
        stats = []
        for layer in task_vector.layers:
            values = layer.values.astype(np.float64)
            if values.size == 0:
                continue
            q1, median, q3 = np.quantile(values, [0.25, 0.5, 0.75])
            stats.append(LayerStats(
                layer=layer.name,
                size=int(values.size),
                mean=float(values.mean()),
                std=float(values.std()),
                min=float(values.min()),
                q1=float(q1),
                median=float(median),
                q3=float(q3),
                max=float(values.max()),
            ))
        return stats

    @staticmethod
    def stats_to_csv(stats: Sequence[LayerStats]) -> str:
        rows = [
            [s.layer, s.size] + [TableFormatter.number(getattr(s, column), 8) for column in STATS_COLUMNS[2:]]
            for s in stats
        ]
        return TableFormatter.csv_text(STATS_COLUMNS, rows)

    @staticmethod
    def cosine_similarity(a: LayeredArrays, b: LayeredArrays) -> float:
        """Cosine of the flattened vectors; 0.0 when either is all zeros."""
        a.require_congruent(b)
        x = a.flatten()
        y = b.flatten()
        norm = float(np.linalg.norm(x) * np.linalg.norm(y))
        if norm == 0.0:
            return 0.0
        return float(np.dot(x, y) / norm)
