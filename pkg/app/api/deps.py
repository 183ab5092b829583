"""
Shared endpoint helpers
"""

from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict

from fastapi import HTTPException, status

from app.core.config import settings
from app.core.errors import EngineError
from app.core.logging import get_logger
from app.core.storage import DataStore
from app.schemas.config import load_run_config
from app.services.pipeline_service import PipelineService

logger = get_logger(__name__)


@contextmanager
def engine_errors():
    """Translate engine failures into 400 responses"""
    try:
        yield
    except EngineError as e:
        logger.warning("api.engine_error", kind=type(e).__name__, error=str(e))
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=str(e))


def pipeline_for(overrides: Dict[str, Any]) -> PipelineService:
    with engine_errors():
        config = load_run_config(settings.DEFAULT_RUN_CONFIG).with_overrides(**overrides)
    return PipelineService(config)


def existing(store: DataStore, kind: str, name: str) -> Path:
    """Stored artifact directory or 404"""
    with engine_errors():
        path = store.artifact(kind, name)
    if not path.is_dir():
        raise HTTPException(status_code=404, detail=f"{kind[:-1].capitalize()} '{name}' not found")
    return path


def fresh(store: DataStore, kind: str, name: str) -> Path:
    """Artifact directory that does not exist yet, or 409"""
    with engine_errors():
        path = store.artifact(kind, name)
    if path.exists():
        raise HTTPException(status_code=409, detail=f"{kind[:-1].capitalize()} '{name}' already exists")
    return path
