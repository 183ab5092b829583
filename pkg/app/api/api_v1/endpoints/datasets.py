"""
Dataset generation endpoints
"""

from fastapi import APIRouter, Depends

from app.api.deps import engine_errors, fresh, pipeline_for
from app.core.storage import DataStore, get_store
from app.schemas.api import ArtifactList, DatasetCreate, DatasetSummary

router = APIRouter()


@router.get("/", response_model=ArtifactList)
def list_datasets(store: DataStore = Depends(get_store)):
    """Get all generated datasets"""
    return ArtifactList(names=store.names("datasets"))


@router.post("/", response_model=DatasetSummary, status_code=201)
def create_dataset(request: DatasetCreate, store: DataStore = Depends(get_store)):
    """Generate a scene and render its frame sequence"""
    out = fresh(store, "datasets", request.name)
    pipeline = pipeline_for(request.config)
    with engine_errors():
        summary = pipeline.generate(out)
    return DatasetSummary(name=request.name, frames=summary["frames"], triangles=summary["triangles"])
