from pathlib import Path

from fastapi import HTTPException, status

from mergeforge.core.config import settings
from mergeforge.core.exceptions import CheckpointNotFoundError
from mergeforge.services.checkpoint_service import CHECKPOINT_SUFFIX


def get_artifact_dir() -> Path:
    """Artifact root dependency; overridden in tests."""
    return Path(settings.ARTIFACT_DIR)


def resolve_checkpoint(artifact_dir: Path, name: str) -> Path:
    """Map a checkpoint name (relative path, suffix optional) to a file under the artifact root."""
    if not name.endswith(CHECKPOINT_SUFFIX):
        name = name + CHECKPOINT_SUFFIX
    root = artifact_dir.resolve()
    path = (root / name).resolve()
    if root not in path.parents:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="Checkpoint name must stay inside the artifact directory"
        )
    if not path.is_file():
        raise CheckpointNotFoundError(f"Checkpoint '{name}' not found")
    return path
