"""
API v1 router configuration
"""

from fastapi import APIRouter
from app.api.api_v1.endpoints import datasets, models, runs, evaluations

api_router = APIRouter()

# Include all endpoint routers
api_router.include_router(datasets.router, prefix="/datasets", tags=["datasets"])
api_router.include_router(models.router, prefix="/models", tags=["models"])
api_router.include_router(runs.router, prefix="/runs", tags=["runs"])
api_router.include_router(evaluations.router, prefix="/evaluations", tags=["evaluations"])
