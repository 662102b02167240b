from pathlib import Path
from typing import List

from fastapi import APIRouter, Depends, Request
from slowapi import Limiter
from slowapi.util import get_remote_address

from mergeforge.api.deps import get_artifact_dir, resolve_checkpoint
from mergeforge.models.parameters import LayeredArrays
from mergeforge.schemas.checkpoint import CheckpointHeader, CheckpointSummary
from mergeforge.schemas.report import LayerStats
from mergeforge.services.checkpoint_service import CheckpointService
from mergeforge.services.task_vector_service import TaskVectorService

router = APIRouter()
limiter = Limiter(key_func=get_remote_address)


@router.get("/", response_model=List[CheckpointSummary])
@limiter.limit("30/minute")
async def list_checkpoints(
    request: Request,  # Required for rate limiting
    artifact_dir: Path = Depends(get_artifact_dir),
):
    """Every readable checkpoint under the artifact directory."""
    return CheckpointService.list_checkpoints(artifact_dir)


@router.get("/{name:path}/stats", response_model=List[LayerStats])
@limiter.limit("30/minute")
async def checkpoint_stats(
    request: Request,  # Required for rate limiting
    name: str,
    artifact_dir: Path = Depends(get_artifact_dir),
):
    """
    Per-layer distribution of a stored checkpoint.
    Intended for task vectors; parameter checkpoints are summarized the same way.
    """
    header, layers = CheckpointService.read_layers(resolve_checkpoint(artifact_dir, name))
    return TaskVectorService.layer_stats(LayeredArrays(spec_id=header.spec_hash, layers=tuple(layers)))


@router.get("/{name:path}", response_model=CheckpointHeader)
@limiter.limit("60/minute")
async def checkpoint_header(
    request: Request,  # Required for rate limiting
    name: str,
    artifact_dir: Path = Depends(get_artifact_dir),
):
    """Header and layer table of one checkpoint."""
    return CheckpointService.inspect_header(resolve_checkpoint(artifact_dir, name))
