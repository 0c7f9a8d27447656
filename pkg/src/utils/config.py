"""
Configuration management using Pydantic Settings
"""
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator
from functools import lru_cache
from dotenv import load_dotenv

# Load .env without overriding variables already exported in the shell
load_dotenv(".env", override=False)


LOG_LEVELS = {
    "error": "ERROR",
    "warn": "WARNING",
    "warning": "WARNING",
    "info": "INFO",
    "debug": "DEBUG",
}


class Settings(BaseSettings):
    """Runtime settings loaded from JETPLAN_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="JETPLAN_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Application
    app_name: str = Field(default="jetplan")
    log_level: str = Field(default="info")
    default_seed: int = Field(default=0)

    # Mixture maintenance
    max_components: int = Field(default=20, ge=1)
    refit_sample_budget: int = Field(default=2000, ge=1)
    refit_em_iterations: int = Field(default=5, ge=0)
    prune_weight: float = Field(default=1e-12, ge=0.0)
    cov_floor: float = Field(default=1e-9, gt=0.0)

    # Output cadence
    heatmap_every: int = Field(default=10, ge=0)
    heatmap_resolution: int = Field(default=60, ge=2)
    plan_log_every: int = Field(default=5, ge=0)

    # Parallelism
    workers: int = Field(default=1, ge=1)

    @field_validator("log_level")
    @classmethod
    def _check_level(cls, value: str) -> str:
        level = value.strip().lower()
        if level not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {sorted(set(LOG_LEVELS))}")
        return level

    @property
    def stdlib_log_level(self) -> str:
        return LOG_LEVELS[self.log_level]


@lru_cache()
def get_settings() -> Settings:
    """Cached settings instance"""
    return Settings()


def get_fresh_settings() -> Settings:
    """Get fresh settings without cache (after changing the environment)"""
    get_settings.cache_clear()
    return get_settings()
