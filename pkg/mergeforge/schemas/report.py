from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class LayerStats(BaseModel):
    """Distribution summary of one task-vector layer."""
    layer: str
    size: int
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float


class CurvePoint(BaseModel):
    lam: float = Field(..., alias="lambda")
    mean_accuracy: float
    accuracies: Dict[str, float]

    model_config = {"populate_by_name": True}


class MethodReport(BaseModel):
    """
    Accuracy and rank of one method over a task set.

    Reference rows (pretrained, individual, multitask) are never ranked.
    """
    method: str
    accuracies: Dict[str, Optional[float]]
    ranks: Dict[str, int] = Field(default_factory=dict)
    average_accuracy: Optional[float] = None
    average_rank: Optional[float] = None
    reference: bool = False


class NodeReport(BaseModel):
    path: str
    tasks: List[str]
    children: List[str]
    seed: int
    epochs: int
    final_loss: float
    validation_examples: int
    validation_tasks: List[str]
    delta_norm: float = Field(0.0, description="L2 norm of the merged model minus the pretrained anchor")
    weights_path: Optional[str] = None


class TraceEvent(BaseModel):
    """One residency change recorded while executing a merge plan."""
    node_path: str
    action: str
    model: str
    resident: int
