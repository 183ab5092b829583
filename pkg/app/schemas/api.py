"""
HTTP request and response schemas
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

NAME_PATTERN = r"^[A-Za-z0-9][A-Za-z0-9_.-]*$"


class JobBase(BaseModel):
    """Output name plus run configuration overrides"""
    name: str = Field(pattern=NAME_PATTERN)
    config: Dict[str, Any] = Field(default_factory=dict)


class DatasetCreate(JobBase):
    """Schema for generating a dataset"""
    pass


class ModelCreate(JobBase):
    """Schema for training a network on stored datasets"""
    datasets: List[str] = Field(min_length=1)
    resume: Optional[str] = None
    start_layer: int = Field(1, ge=1)


class RunCreate(JobBase):
    """Schema for running the online pipeline on a stored dataset"""
    dataset: str
    model: str


class EvaluationCreate(JobBase):
    """Schema for scoring predictions; paths are relative to the data directory"""
    predicted: str
    ground_truth: str


class DatasetSummary(BaseModel):
    name: str
    frames: int
    triangles: int


class ArtifactList(BaseModel):
    names: List[str]
