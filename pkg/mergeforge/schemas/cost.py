from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class FlopsMode(str, Enum):
    TRAINING = "training"
    MERGE_FIT = "merge_fit"
    INFERENCE = "inference"


class CostInput(BaseModel):
    """
    Inputs of the peak-memory and FLOPs model.

    Memory: weights (4 B/param), gradients (4 B/trainable), AdamW moments
    (8 B/trainable) and, when merging, k task vectors (4 B/entry).
    """
    n_para: int = Field(..., ge=0, description="Total model parameters")
    n_trainable: int = Field(..., ge=0, description="Trainable parameters")
    n_task_vector: int = Field(default=0, ge=0, description="Entries of one task vector")
    k: int = Field(default=1, ge=0, description="Number of tasks merged")
    is_merging: bool = False
    n_samples: int = Field(default=0, ge=0)
    flops_fwd_coeff: float = Field(default=2.0, gt=0.0)
    flops_train_coeff: float = Field(default=4.0, gt=0.0)
    flops_merge_backward_coeff: float = Field(default=1.52, gt=0.0)
    flops_scale: float = Field(default=1.0, gt=0.0)

    @model_validator(mode="after")
    def check_merging_k(self) -> "CostInput":
        if self.is_merging and self.k < 1:
            raise ValueError("k must be at least 1 when merging")
        return self


class FlopsRequest(BaseModel):
    cost: CostInput
    mode: FlopsMode = FlopsMode.TRAINING


class MemoryBreakdown(BaseModel):
    weights: int
    gradients: int
    optimizer_states: int
    task_vectors: int
    total_bytes: int
    total_gb: float
    total_gib: float


class FlopsResponse(BaseModel):
    mode: FlopsMode
    flops_per_epoch: float


class CostRow(BaseModel):
    """One row of the cost table (parameters, trainable, peak memory, samples, FLOPs)."""
    method: str
    n_parameters: int
    n_trainable: int
    peak_memory_bytes: int
    peak_memory_gb: float
    peak_memory_gib: float
    n_samples: int
    flops_per_epoch: float


class CostTable(BaseModel):
    rows: List[CostRow]


class PeakModelsMeasurement(BaseModel):
    peak_concurrent_models: int
    modeled_k: int
    modeled_bytes: int
    fan_in_limit: Optional[int] = None
