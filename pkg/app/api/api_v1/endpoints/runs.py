"""
Reconstruction and label fusion run endpoints
"""

from fastapi import APIRouter, Depends, HTTPException

from app.api.deps import engine_errors, existing, fresh, pipeline_for
from app.core.storage import DataStore, get_store
from app.schemas.api import ArtifactList, RunCreate
from app.schemas.metrics import RunMetrics
from app.services.pipeline_service import METRICS, WEIGHTS

router = APIRouter()


@router.get("/", response_model=ArtifactList)
def list_runs(store: DataStore = Depends(get_store)):
    """Get all runs"""
    return ArtifactList(names=store.names("runs"))


@router.post("/", response_model=RunMetrics, status_code=201)
def create_run(request: RunCreate, store: DataStore = Depends(get_store)):
    """Track, fuse and segment a stored dataset with a trained model"""
    sequence = existing(store, "datasets", request.dataset)
    weights = existing(store, "models", request.model) / WEIGHTS
    out = fresh(store, "runs", request.name)
    pipeline = pipeline_for(request.config)
    with engine_errors():
        return pipeline.run(sequence, weights, out)


@router.get("/{name}/metrics", response_model=RunMetrics)
def get_run_metrics(name: str, store: DataStore = Depends(get_store)):
    """Get the metrics of a finished (or aborted) run"""
    metrics = existing(store, "runs", name) / METRICS
    if not metrics.exists():
        raise HTTPException(status_code=404, detail="Run metrics not found")
    return RunMetrics.model_validate_json(metrics.read_text(encoding="utf-8"))
