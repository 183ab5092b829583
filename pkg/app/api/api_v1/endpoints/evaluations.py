"""
Evaluation endpoints
"""

from fastapi import APIRouter, Depends, HTTPException

from app.api.deps import engine_errors, fresh, pipeline_for
from app.core.storage import DataStore, get_store
from app.schemas.api import EvaluationCreate
from app.schemas.metrics import SegMetrics

router = APIRouter()


@router.post("/", response_model=SegMetrics, status_code=201)
def create_evaluation(request: EvaluationCreate, store: DataStore = Depends(get_store)):
    """Score label views or label-volume dumps against ground truth"""
    with engine_errors():
        predicted = store.resolve(request.predicted)
        ground_truth = store.resolve(request.ground_truth)
    for path in (predicted, ground_truth):
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"'{path.relative_to(store.root)}' not found")
    out = fresh(store, "evaluations", request.name)
    pipeline = pipeline_for(request.config)
    with engine_errors():
        return pipeline.evaluate(predicted, ground_truth, out)
