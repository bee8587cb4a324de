"""
Process-level settings for fg-array-sim.

Read from the environment (prefix FGSIM_) or an optional .env file.
Nothing here is required; every value has a default.
"""
from pathlib import Path
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(
        env_prefix="FGSIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    log_level: str = "INFO"
    output_dir: Path = Path("results")

    # Monte Carlo fan-out
    workers: int = 1

    # Bundled experiment templates; None means <repo>/templates
    templates_dir: Optional[Path] = None


def get_settings() -> Settings:
    """Build a fresh Settings instance (re-reads the environment)."""
    return Settings()
