"""
Camera intrinsics and rigid poses
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

ORTHONORMAL_TOL = 1e-9


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics in pixels"""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(525.0, gt=0)
    fy: float = Field(525.0, gt=0)
    cx: float = 319.5
    cy: float = 239.5
    width: int = Field(640, gt=0)
    height: int = Field(480, gt=0)

    @model_validator(mode="after")
    def check_principal_point(self):
        if not 0 <= self.cx < self.width:
            raise ValueError(f"cx={self.cx} outside [0, {self.width})")
        if not 0 <= self.cy < self.height:
            raise ValueError(f"cy={self.cy} outside [0, {self.height})")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics of the same camera resampled by `factor`"""
        width = max(1, int(round(self.width * factor)))
        height = max(1, int(round(self.height * factor)))
        return CameraIntrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=width,
            height=height,
        )

    def pixel_grid(self) -> Tuple[np.ndarray, np.ndarray]:
        """(u, v) float grids of pixel centers, shape (H, W)"""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        return np.meshgrid(u, v)

    def ray_directions(self) -> np.ndarray:
        """Unnormalized camera-frame directions (x, y, 1) per pixel, (H, W, 3)"""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping camera-frame points to world frame"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise ValueError("pose has non-finite entries")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "Pose":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:3, :3], matrix[:3, 3])

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :4] = self.matrix34()
        return out

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) to world frame"""
        return points @ self.rotation.T + self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """World-frame points (..., 3) to camera frame"""
        return (points - self.translation) @ self.rotation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def rotation_angle_to(self, other: "Pose") -> float:
        """Angle in radians of the relative rotation"""
        relative = self.rotation.T @ other.rotation
        cos = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(cos))

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))
