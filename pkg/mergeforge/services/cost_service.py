import logging
from typing import List, Optional, Sequence, Tuple, Union

from mergeforge.core.exceptions import DataError
from mergeforge.schemas.config import CostConfig
from mergeforge.schemas.cost import CostInput, CostRow, FlopsMode, MemoryBreakdown, PeakModelsMeasurement
from mergeforge.schemas.report import TraceEvent
from mergeforge.utils.tables import TableFormatter

logger = logging.getLogger(__name__)

WEIGHT_BYTES = 4
GRADIENT_BYTES = 4
OPTIMIZER_STATE_BYTES = 8  # two fp32 AdamW moments
TASK_VECTOR_BYTES = 4

GB = 10 ** 9
GIB = 2 ** 30

COST_COLUMNS = (
    "method", "parameters", "trainable", "peak_memory_gb", "peak_memory_gib", "samples", "flops_per_epoch",
)


class CostService:
    """Analytic peak memory and FLOPs per epoch for fine-tuning and merging."""

    @staticmethod
    def breakdown(c: CostInput) -> MemoryBreakdown:
        weights = WEIGHT_BYTES * c.n_para
        gradients = GRADIENT_BYTES * c.n_trainable
        optimizer_states = OPTIMIZER_STATE_BYTES * c.n_trainable
        task_vectors = TASK_VECTOR_BYTES * c.k * c.n_task_vector if c.is_merging else 0
        total = weights + gradients + optimizer_states + task_vectors
        return MemoryBreakdown(
            weights=weights,
            gradients=gradients,
            optimizer_states=optimizer_states,
            task_vectors=task_vectors,
            total_bytes=total,
            total_gb=total / GB,
            total_gib=total / GIB,
        )

    @staticmethod
    def peak_memory_bytes(c: CostInput) -> int:
        """4*n_para + 4*n_trainable + 8*n_trainable + [merging] 4*k*n_task_vector (exact ints)."""
        return CostService.breakdown(c).total_bytes

    @staticmethod
    def flops_per_epoch(c: CostInput, mode: Union[FlopsMode, str]) -> float:
        """
        scale * n_samples * per-sample cost.

        inference: fwd * n_para
        merge_fit: (fwd + merge_backward) * n_para
        training:  fwd * n_para + train * n_trainable
        """
        mode = FlopsMode(mode)
        if mode == FlopsMode.INFERENCE:
            per_sample = c.flops_fwd_coeff * c.n_para
        elif mode == FlopsMode.MERGE_FIT:
            per_sample = (c.flops_fwd_coeff + c.flops_merge_backward_coeff) * c.n_para
        else:
            per_sample = c.flops_fwd_coeff * c.n_para + c.flops_train_coeff * c.n_trainable
        return float(c.flops_scale * c.n_samples * per_sample)

    @staticmethod
    def measure_peak_models(
        trace: Union[Sequence[TraceEvent], int],
        base: CostInput,
        fan_in_limit: Optional[int] = None,
    ) -> PeakModelsMeasurement:
        """
        Turn a measured residency peak into modeled bytes.

        The model being formed is already counted by the weights term, so the
        task-vector term uses k = peak - 1.
        """
        if isinstance(trace, int):
            peak = trace
        else:
            if not trace:
                raise DataError("Execution trace is empty")
            peak = max(event.resident for event in trace)
        if peak < 2:
            raise DataError(f"A merge needs at least two resident models, trace peaked at {peak}")
        modeled_k = peak - 1
        modeled = base.model_copy(update={"k": modeled_k, "is_merging": True})
        return PeakModelsMeasurement(
            peak_concurrent_models=peak,
            modeled_k=modeled_k,
            modeled_bytes=CostService.peak_memory_bytes(modeled),
            fan_in_limit=fan_in_limit,
        )

    @staticmethod
    def scenario_inputs(cfg: CostConfig, fan_in_limit: int = 2) -> List[Tuple[str, CostInput, FlopsMode]]:
        """(method, CostInput, FlopsMode) for the four cost scenarios."""
        shared = dict(
            n_para=cfg.n_para,
            n_task_vector=cfg.task_vector_size,
            flops_fwd_coeff=cfg.flops_fwd_coeff,
            flops_train_coeff=cfg.flops_train_coeff,
            flops_merge_backward_coeff=cfg.flops_merge_backward_coeff,
            flops_scale=cfg.flops_scale,
        )
        return [
            ("full_fine_tuning", CostInput(
                n_trainable=cfg.n_para, k=1, is_merging=False, n_samples=cfg.training_samples, **shared
            ), FlopsMode.TRAINING),
            ("non_gradient_merging", CostInput(
                n_trainable=0, k=cfg.k, is_merging=True, n_samples=cfg.merge_samples, **shared
            ), FlopsMode.INFERENCE),
            ("supermerge", CostInput(
                n_trainable=cfg.k * cfg.n_layers, k=cfg.k, is_merging=True, n_samples=cfg.merge_samples, **shared
            ), FlopsMode.MERGE_FIT),
            ("hierarchical", CostInput(
                n_trainable=fan_in_limit * cfg.n_layers, k=fan_in_limit, is_merging=True,
                n_samples=cfg.merge_samples, **shared
            ), FlopsMode.MERGE_FIT),
        ]

    @staticmethod
    def scenario_rows(cfg: CostConfig, fan_in_limit: int = 2) -> List[CostRow]:
        rows = []
        for method, cost, mode in CostService.scenario_inputs(cfg, fan_in_limit):
            memory = CostService.breakdown(cost)
            rows.append(CostRow(
                method=method,
                n_parameters=cost.n_para,
                n_trainable=cost.n_trainable,
                peak_memory_bytes=memory.total_bytes,
                peak_memory_gb=memory.total_gb,
                peak_memory_gib=memory.total_gib,
                n_samples=cost.n_samples,
                flops_per_epoch=CostService.flops_per_epoch(cost, mode),
            ))
            logger.debug("cost row %s: %d bytes", method, memory.total_bytes)
        return rows

    @staticmethod
    def format_bytes(n_bytes: int) -> str:
        return f"{n_bytes / GB:.1f} GB / {n_bytes / GIB:.1f} GiB"

    @staticmethod
    def table_rows(rows: Sequence[CostRow]) -> List[list]:
        return [
            [
                row.method,
                row.n_parameters,
                row.n_trainable,
                f"{row.peak_memory_gb:.1f}",
                f"{row.peak_memory_gib:.1f}",
                row.n_samples,
                f"{row.flops_per_epoch:.2e}",
            ]
            for row in rows
        ]

    @staticmethod
    def rows_to_csv(rows: Sequence[CostRow]) -> str:
        return TableFormatter.csv_text(COST_COLUMNS, CostService.table_rows(rows))

    @staticmethod
    def rows_to_markdown(rows: Sequence[CostRow]) -> str:
        return TableFormatter.markdown(COST_COLUMNS, CostService.table_rows(rows))
