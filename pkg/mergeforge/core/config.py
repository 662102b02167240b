from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator
from typing import List, Optional, Union
from pathlib import Path


class Settings(BaseSettings):
    """Runtime settings with environment variable support."""

    # Application settings
    PROJECT_NAME: str = "mergeforge"
    VERSION: str = "1.0.0"
    DESCRIPTION: str = "Model merging toolkit with learned layer-wise merge weights"
    API_V1_STR: str = "/api/v1"

    # Artifact storage
    ARTIFACT_DIR: Path = Field(
        default=Path("./artifacts"),
        description="Directory holding checkpoints, datasets and reports"
    )
    DEFAULT_CONFIG_PATH: Optional[Path] = Field(
        default=None,
        description="Experiment config used when the CLI gets no --config"
    )

    # Logging
    LOG_LEVEL: str = Field(default="INFO", description="Root log level")
    LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"

    # CORS settings
    BACKEND_CORS_ORIGINS: Union[List[str], str] = [
        "http://localhost:3000",
        "http://localhost:8000",
        "http://127.0.0.1:8000",
    ]

    @field_validator('BACKEND_CORS_ORIGINS', mode='before')
    @classmethod
    def assemble_cors_origins(cls, v: Union[str, List[str]]) -> Union[List[str], str]:
        if isinstance(v, str) and not v.startswith('['):
            return [i.strip() for i in v.split(',')]
        elif isinstance(v, (list, str)):
            return v
        raise ValueError(v)

    @field_validator('LOG_LEVEL')
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return level

    # Rate limiting
    RATE_LIMIT_PER_MINUTE: int = 100

    # Environment settings
    ENVIRONMENT: str = Field(default="development", description="Environment")
    DEBUG: bool = Field(default=False, description="Enable debug mode")

    @property
    def rate_limit(self) -> str:
        return f"{self.RATE_LIMIT_PER_MINUTE}/minute"

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")


# Create global settings instance
settings = Settings()
