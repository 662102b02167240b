from datetime import datetime, timezone

from fastapi import FastAPI, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from slowapi import Limiter, _rate_limit_exceeded_handler
from slowapi.errors import RateLimitExceeded
from slowapi.middleware import SlowAPIMiddleware
from slowapi.util import get_remote_address

from mergeforge.api.v1 import checkpoints, cost
from mergeforge.core.config import settings
from mergeforge.core.exceptions import (
    CheckpointError,
    CheckpointNotFoundError,
    ConfigError,
    DataError,
    MergeForgeError,
    StructuralError,
)
from mergeforge.core.logging import configure_logging

configure_logging()

# Create rate limiter instance
limiter = Limiter(key_func=get_remote_address, default_limits=[settings.rate_limit])

app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    description=settings.DESCRIPTION,
    openapi_url=f"{settings.API_V1_STR}/openapi.json",
    docs_url="/docs",
    redoc_url="/redoc"
)

app.state.limiter = limiter
app.add_exception_handler(RateLimitExceeded, _rate_limit_exceeded_handler)
app.add_middleware(SlowAPIMiddleware)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.BACKEND_CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _status_for(exc: MergeForgeError) -> int:
    if isinstance(exc, CheckpointNotFoundError):
        return status.HTTP_404_NOT_FOUND
    if isinstance(exc, (StructuralError, ConfigError, DataError, CheckpointError)):
        return status.HTTP_422_UNPROCESSABLE_ENTITY
    return status.HTTP_500_INTERNAL_SERVER_ERROR


async def mergeforge_error_handler(request: Request, exc: MergeForgeError) -> JSONResponse:
    return JSONResponse(
        status_code=_status_for(exc),
        content={"detail": str(exc), "error": type(exc).__name__},
    )


app.add_exception_handler(MergeForgeError, mergeforge_error_handler)

app.include_router(cost.router, prefix=f"{settings.API_V1_STR}/cost", tags=["cost"])
app.include_router(checkpoints.router, prefix=f"{settings.API_V1_STR}/checkpoints", tags=["checkpoints"])


@app.get("/")
async def root():
    return {
        "message": settings.PROJECT_NAME,
        "version": settings.VERSION,
        "status": "operational"
    }


@app.get("/health")
async def health_check():
    """Detailed health check endpoint."""
    return {
        "status": "healthy",
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "version": settings.VERSION,
        "environment": settings.ENVIRONMENT,
        "artifact_dir": str(settings.ARTIFACT_DIR),
    }


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "mergeforge.main:app",
        host="0.0.0.0",
        port=8000,
        reload=settings.DEBUG,
        log_level=settings.LOG_LEVEL.lower()
    )
