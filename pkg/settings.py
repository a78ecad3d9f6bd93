"""
Process-level settings read from the environment (prefix SPAR_) or a .env file.
"""

from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SPAR_", env_file=".env", extra="ignore")

    seed: Optional[int] = None
    log_level: str = "INFO"
    jobs: int = 1
    mip_time_budget: float = 60.0
    mip_max_nodes: int = 1_000_000


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Return the cached settings instance."""
    return Settings()
