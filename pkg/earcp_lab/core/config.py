import logging
from typing import Optional

from pydantic_settings import BaseSettings

class Settings(BaseSettings):
    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Output
    OUTPUT_DIR: str = "./results"
    FLOAT_FORMAT: str = "%.17g"

    # Aggregator sessions
    MAX_PENDING_FEEDBACK: int = 1024

    # Stream ingestion
    INGEST_CHUNK_ROWS: int = 65536

    # Reporting
    BOOTSTRAP_RESAMPLES: int = 1000
    BOOTSTRAP_SEED: int = 0

    # Background Tasks
    CELERY_BROKER_URL: str = "redis://localhost:6379"
    CELERY_RESULT_BACKEND: str = "redis://localhost:6379"
    CELERY_TASK_ALWAYS_EAGER: bool = True
    CELERY_QUEUE: str = "experiments"

    model_config = {
        "env_file": ".env",
        "case_sensitive": True
    }

settings = Settings()

def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging once for CLI entry points"""
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper()),
        format=settings.LOG_FORMAT,
        force=True
    )
