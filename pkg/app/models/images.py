"""
Raster models: depth, labels, features and class probabilities
"""

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from app.models.scene import VOID_ID

# Z-depth in millimeters, 0 = no measurement
DepthImage = npt.NDArray[np.uint16]
# Class ids, VOID_ID = no measurement
LabelImage = npt.NDArray[np.uint8]

def depth_to_millimeters(depth_m: np.ndarray) -> DepthImage:
    """Round metric Z to the 16-bit millimeter raster (0 stays invalid)"""
    valid = np.isfinite(depth_m) & (depth_m > 0)
    mm = np.zeros(depth_m.shape, dtype=np.uint16)
    mm[valid] = np.clip(np.rint(depth_m[valid] * 1000.0), 1, 65535).astype(np.uint16)
    return mm


@dataclass(eq=False)
class FeatureImage:
    """Four normalized DHAC channels with a shared validity mask"""

    channels: np.ndarray  # (4, H, W) float32
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.channels.ndim != 3 or self.channels.shape[1:] != self.mask.shape:
            raise ValueError("channels must be (C, H, W) matching the mask")
        self.channels[:, ~self.mask] = 0.0

    @property
    def shape(self):
        return self.mask.shape

    @property
    def num_channels(self) -> int:
        return self.channels.shape[0]


@dataclass(eq=False)
class ProbabilityImage:
    """Per-pixel class distributions (K, H, W); masked pixels are uniform"""

    probs: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.probs = np.ascontiguousarray(self.probs, dtype=np.float32)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.probs.ndim != 3 or self.probs.shape[1:] != self.mask.shape:
            raise ValueError("probs must be (K, H, W) matching the mask")

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> LabelImage:
        """Hard labels; masked pixels are void"""
        labels = np.argmax(self.probs, axis=0).astype(np.uint8)
        labels[~self.mask] = VOID_ID
        return labels

    @classmethod
    def from_labels(cls, labels: LabelImage, num_classes: int, confidence: float = 1.0) -> "ProbabilityImage":
        """Softened one-hot distributions from hard labels"""
        height, width = labels.shape
        mask = labels != VOID_ID
        if num_classes > 1:
            rest = (1.0 - confidence) / (num_classes - 1)
        else:
            rest = 0.0
        probs = np.full((num_classes, height, width), rest, dtype=np.float64)
        rows, cols = np.nonzero(mask)
        probs[labels[rows, cols].astype(np.int64), rows, cols] = confidence
        probs[:, ~mask] = 1.0 / num_classes
        return cls(probs, mask)


@dataclass(eq=False)
class SurfaceMap:
    """Per-pixel model surface seen from a pose: depth, world points and world normals"""

    depth: DepthImage  # millimeters, 0 = no surface
    depth_mm: np.ndarray  # float millimeters, 0 = no surface
    points: np.ndarray  # (H, W, 3) world frame, meters
    normals: np.ndarray  # (H, W, 3) world frame, unit
    valid: np.ndarray  # (H, W) bool

    @property
    def shape(self):
        return self.valid.shape

    @property
    def num_valid(self) -> int:
        return int(self.valid.sum())
