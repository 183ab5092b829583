"""
Evaluation and training report schemas
"""

from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class SegMetrics(BaseModel):
    """Confusion-matrix metrics over pixels or voxels (void excluded)"""

    accuracy: float = Field(ge=0, le=1)
    per_class_accuracy: List[Optional[float]]
    class_average_accuracy: float = Field(ge=0, le=1)
    confusion: List[List[int]]
    support: List[int]
    total: int
    coverage: float = Field(1.0, ge=0, le=1)


class LayerReport(BaseModel):
    """Training outcome of one layer"""

    layer: int
    scale: int
    initial_loss: float
    final_loss: float
    train_accuracy: float
    epochs: int


class TrainReport(BaseModel):
    """Per-layer accuracy after layer-wise training"""

    layers: List[LayerReport]
    layer_accuracy: List[float]
    num_images: int
    num_classes: int
    weights_sha256: str


class FusionExperiment(BaseModel):
    """Fused vs single-view accuracy of the label-corruption experiment"""

    seeds: List[int]
    fused_accuracy: List[float]
    per_frame_accuracy: List[float]
    mean_gain: float


class RunMetrics(BaseModel):
    """Metrics emitted by a reconstruction + segmentation run"""

    frames: int
    pose_source: str
    per_frame_accuracy: List[float]
    mean_frame_accuracy: float
    fused_view_accuracy: float
    fused_volume: SegMetrics
    majority_baseline: float
    tracking: Dict[str, float] = Field(default_factory=dict)
    completed: bool = True
