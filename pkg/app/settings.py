"""Process-level settings read from the environment (Pydantic v2)."""

from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field


class Settings(BaseSettings):
    """Process settings.

    Model and training hyperparameters live in the run configuration file
    (see ``schemas.RunConfig``); only things that describe the environment
    the pipeline runs in belong here.
    """

    # Logging
    log_level: str = Field(default="INFO", description="Root logger level")
    log_format: str = Field(
        default="%(asctime)s %(levelname)s %(name)s: %(message)s",
        description="logging.Formatter pattern",
    )

    # Prometheus text exposition written on exit when set
    metrics_file: Optional[str] = Field(default=None)

    # Run configuration used when --config is absent
    default_config: Optional[str] = Field(default=None)

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        env_prefix="HRE_",
    )


# Global settings instance
settings = Settings()
