"""
Application configuration settings
"""

from pydantic_settings import BaseSettings
from typing import Optional


class Settings(BaseSettings):
    """Process-level settings"""

    # Project Information
    PROJECT_NAME: str = "SemFusion"
    VERSION: str = "0.3.0"
    API_V1_STR: str = "/api/v1"

    # Storage root for datasets, weights and runs served over HTTP
    DATA_DIR: str = "data"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False

    # Worker threads for row / slab parallel kernels
    WORKERS: int = 4

    # Default run config file used when a command gets no --config
    DEFAULT_RUN_CONFIG: Optional[str] = None

    # Environment
    ENVIRONMENT: str = "development"
    DEBUG: bool = False

    class Config:
        env_file = ".env"
        case_sensitive = True


# Create settings instance
settings = Settings()
