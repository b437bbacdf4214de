"""
Runtime settings for the matting engine.
"""
from functools import lru_cache
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class MattingSettings(BaseSettings):
    """Process-wide settings, read from ``MATTING_*`` env vars or ``.env``."""

    # Logging
    log_level: str = "INFO"
    log_format: Literal["console", "json"] = "console"

    # Execution
    default_seed: int = 0
    worker_threads: int = 1
    queue_depth: int = 4

    model_config = SettingsConfigDict(
        env_prefix="MATTING_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )


@lru_cache
def get_settings() -> MattingSettings:
    """Get the cached settings instance."""
    return MattingSettings()
