import os
import logging
from typing import Optional

from pydantic import BaseModel, validator

# Load environment variables from .env file
try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

logger = logging.getLogger(__name__)


class Settings(BaseModel):
    """Process-wide settings read from the environment."""

    threads: Optional[int] = None
    log_level: str = "INFO"
    database_url: Optional[str] = None

    @validator("threads")
    def validate_threads(cls, v):
        if v is not None and v < 1:
            raise ValueError("LRTD_THREADS must be a positive integer")
        return v

    @validator("log_level")
    def validate_log_level(cls, v):
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        v = v.upper()
        if v not in valid_levels:
            raise ValueError(f'Log level must be one of: {", ".join(valid_levels)}')
        return v


def get_settings() -> Settings:
    threads = os.getenv("LRTD_THREADS")
    return Settings(
        threads=int(threads) if threads else None,
        log_level=os.getenv("LRTD_LOG_LEVEL", "INFO"),
        database_url=os.getenv("LRTD_DATABASE_URL") or None,
    )


def apply_thread_cap(settings: Settings) -> None:
    """Cap torch intra-op parallelism when LRTD_THREADS is set."""
    if settings.threads is None:
        return
    import torch

    torch.set_num_threads(settings.threads)
    logger.info(f"Torch thread cap set to {settings.threads}")
