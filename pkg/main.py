"""
SemFusion - semantic reconstruction API
Main FastAPI application entry point
"""

from pathlib import Path

from fastapi import FastAPI
import uvicorn

from app.core.config import settings
from app.core.logging import configure_logging, get_logger
from app.api.api_v1.api import api_router

configure_logging()
logger = get_logger(__name__)

# Initialize FastAPI app
app = FastAPI(
    title=settings.PROJECT_NAME,
    version=settings.VERSION,
    description="Dense semantic labelling of RGB-D reconstructions from depth-only features",
    openapi_url=f"{settings.API_V1_STR}/openapi.json",
)


@app.on_event("startup")
async def startup_event():
    """Create the data directory on startup"""
    Path(settings.DATA_DIR).mkdir(parents=True, exist_ok=True)
    logger.info("api.startup", data_dir=str(Path(settings.DATA_DIR).resolve()),
                environment=settings.ENVIRONMENT, workers=settings.WORKERS)


# Include API router
app.include_router(api_router, prefix=settings.API_V1_STR)


@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": f"{settings.PROJECT_NAME} API",
        "version": settings.VERSION,
        "docs": "/docs"
    }


@app.get("/health")
async def health_check():
    """Health check endpoint"""
    data_dir = Path(settings.DATA_DIR)
    return {
        "status": "healthy",
        "version": settings.VERSION,
        "environment": settings.ENVIRONMENT,
        "data_dir_writable": data_dir.is_dir() and data_dir.stat().st_mode & 0o200 != 0,
    }


@app.get("/ping")
async def ping():
    """Simple ping endpoint"""
    return {"message": "pong", "status": "ok"}


if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=settings.DEBUG,
        log_level=settings.LOG_LEVEL.lower()
    )
