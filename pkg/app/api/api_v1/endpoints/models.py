"""
Network training endpoints
"""

from fastapi import APIRouter, Depends, HTTPException

from app.api.deps import engine_errors, existing, fresh, pipeline_for
from app.core.storage import DataStore, get_store
from app.schemas.api import ArtifactList, ModelCreate
from app.schemas.metrics import TrainReport
from app.services.pipeline_service import TRAIN_REPORT, WEIGHTS

router = APIRouter()


@router.get("/", response_model=ArtifactList)
def list_models(store: DataStore = Depends(get_store)):
    """Get all trained models"""
    return ArtifactList(names=store.names("models"))


@router.post("/", response_model=TrainReport, status_code=201)
def train_model(request: ModelCreate, store: DataStore = Depends(get_store)):
    """Train a network layer by layer on stored datasets"""
    datasets = [existing(store, "datasets", name) for name in request.datasets]
    resume = None
    if request.resume is not None:
        resume = existing(store, "models", request.resume) / WEIGHTS
    elif request.start_layer > 1:
        raise HTTPException(status_code=400, detail="start_layer needs resume")
    out = fresh(store, "models", request.name)
    pipeline = pipeline_for(request.config)
    with engine_errors():
        return pipeline.train(datasets, out, resume=resume, start_layer=request.start_layer - 1)


@router.get("/{name}", response_model=TrainReport)
def get_model(name: str, store: DataStore = Depends(get_store)):
    """Get the training report of a model"""
    report = existing(store, "models", name) / TRAIN_REPORT
    if not report.exists():
        raise HTTPException(status_code=404, detail="Training report not found")
    return TrainReport.model_validate_json(report.read_text(encoding="utf-8"))
