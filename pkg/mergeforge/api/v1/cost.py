from fastapi import APIRouter, Depends, Query, Request
from slowapi import Limiter
from slowapi.util import get_remote_address

from mergeforge.schemas.config import CostConfig
from mergeforge.schemas.cost import CostInput, CostTable, FlopsRequest, FlopsResponse, MemoryBreakdown
from mergeforge.services.cost_service import CostService

router = APIRouter()
limiter = Limiter(key_func=get_remote_address)


@router.post("/peak-memory", response_model=MemoryBreakdown)
@limiter.limit("60/minute")
async def peak_memory(
    request: Request,  # Required for rate limiting
    cost: CostInput,
):
    """
    Peak memory of one training or merging configuration.
    Returns the per-term byte counts and the total in GB and GiB.
    """
    return CostService.breakdown(cost)


@router.post("/flops", response_model=FlopsResponse)
@limiter.limit("60/minute")
async def flops_per_epoch(
    request: Request,  # Required for rate limiting
    payload: FlopsRequest,
):
    """FLOPs of one epoch in the requested mode."""
    return FlopsResponse(mode=payload.mode, flops_per_epoch=CostService.flops_per_epoch(payload.cost, payload.mode))


def _default_cost_config() -> CostConfig:
    return CostConfig()


@router.get("/scenarios", response_model=CostTable)
@limiter.limit("30/minute")
async def scenarios(
    request: Request,  # Required for rate limiting
    fan_in_limit: int = Query(2, ge=2, description="Fan-in of the hierarchical scenario"),
    cfg: CostConfig = Depends(_default_cost_config),
):
    """
    Cost table for full fine-tuning, non-gradient merging, learned merging
    and hierarchical merging at the configured model scale.
    """
    return CostTable(rows=CostService.scenario_rows(cfg, fan_in_limit))
