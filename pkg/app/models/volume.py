"""
Voxel volume models: grid geometry, TSDF state, label state, gravity frame
"""

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from app.models.scene import VOID_ID

# Fixed-point scale for label log-probability accumulators
LOG_FIXED_SCALE = float(2 ** 32)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Regular grid; voxel (i, j, k) has its center at origin + (idx + 0.5) * voxel_size"""

    origin: np.ndarray
    voxel_size: float
    dims: Tuple[int, int, int]

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.voxel_size <= 0 or min(self.dims) <= 0:
            raise ValueError("voxel_size and dims must be positive")

    @classmethod
    def for_bounds(cls, bounds: Tuple[np.ndarray, np.ndarray], dim: int = 128,
                   margin: float = 0.5) -> "VoxelGrid":
        """Cubic voxels covering bounds plus margin with `dim` voxels per axis"""
        lo = np.asarray(bounds[0], dtype=np.float64) - margin
        hi = np.asarray(bounds[1], dtype=np.float64) + margin
        voxel_size = float((hi - lo).max()) / dim
        center = 0.5 * (lo + hi)
        origin = center - 0.5 * voxel_size * dim
        return cls(origin, voxel_size, (dim, dim, dim))

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.origin, self.origin + self.voxel_size * np.asarray(self.dims)

    def same_geometry(self, other: "VoxelGrid") -> bool:
        return (
            self.dims == other.dims
            and self.voxel_size == other.voxel_size
            and np.array_equal(self.origin, other.origin)
        )

    def to_grid(self, points: np.ndarray) -> np.ndarray:
        """Continuous index coordinates, voxel centers at integers"""
        return (points - self.origin) / self.voxel_size - 0.5

    def voxel_of(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Integer voxel indices (..., 3) of the voxels containing points, and in-bounds mask"""
        idx = np.floor((points - self.origin) / self.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index((idx[..., 0], idx[..., 1], idx[..., 2]), self.dims)

    def centers_slab(self, x_start: int, x_stop: int) -> np.ndarray:
        """World centers of voxels with x index in [x_start, x_stop), shape (n, ny, nz, 3)"""
        ix = np.arange(x_start, x_stop, dtype=np.float64)
        iy = np.arange(self.dims[1], dtype=np.float64)
        iz = np.arange(self.dims[2], dtype=np.float64)
        gx, gy, gz = np.meshgrid(ix, iy, iz, indexing="ij")
        grid = np.stack([gx, gy, gz], axis=-1)
        return self.origin + (grid + 0.5) * self.voxel_size


@dataclass(eq=False)
class TsdfVolume:
    """Truncated signed distances in [-1, 1] with integration weights"""

    grid: VoxelGrid
    mu: float
    weight_max: float = 100.0
    tsdf: np.ndarray = field(default=None)
    weight: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tsdf is None:
            self.tsdf = np.ones(self.grid.dims, dtype=np.float32)
        if self.weight is None:
            self.weight = np.zeros(self.grid.dims, dtype=np.float32)
        if self.tsdf.shape != self.grid.dims or self.weight.shape != self.grid.dims:
            raise ValueError("tsdf / weight arrays must match grid dims")
        if self.mu <= 0:
            raise ValueError("truncation mu must be positive")

    @classmethod
    def for_bounds(cls, bounds, dim: int = 128, margin: float = 0.5, mu_voxels: float = 4.0,
                   weight_max: float = 100.0) -> "TsdfVolume":
        grid = VoxelGrid.for_bounds(bounds, dim=dim, margin=margin)
        return cls(grid=grid, mu=mu_voxels * grid.voxel_size, weight_max=weight_max)

    @property
    def voxel_size(self) -> float:
        return self.grid.voxel_size

    @property
    def observed(self) -> np.ndarray:
        return self.weight > 0

    def has_observations(self) -> bool:
        return bool(np.any(self.weight > 0))


@dataclass(eq=False)
class LabelVolume:
    """Per-voxel class log-probability sums (fixed point) and observation counts"""

    grid: VoxelGrid
    num_classes: int
    accumulators: np.ndarray = field(default=None)  # (nx, ny, nz, K) int64
    counts: np.ndarray = field(default=None)  # (nx, ny, nz) int32

    def __post_init__(self):
        shape = self.grid.dims + (self.num_classes,)
        if self.accumulators is None:
            self.accumulators = np.zeros(shape, dtype=np.int64)
        if self.counts is None:
            self.counts = np.zeros(self.grid.dims, dtype=np.int32)
        if self.accumulators.shape != shape or self.counts.shape != self.grid.dims:
            raise ValueError("accumulator arrays must match grid dims and class count")

    @property
    def log_sums(self) -> np.ndarray:
        """Accumulated log-probabilities as float64"""
        return self.accumulators.astype(np.float64) / LOG_FIXED_SCALE

    @property
    def observed(self) -> np.ndarray:
        return self.counts > 0

    def posterior(self, index: Tuple[int, int, int]) -> np.ndarray:
        """Normalized class distribution of one voxel (uniform when unobserved)"""
        logs = self.accumulators[index].astype(np.float64) / LOG_FIXED_SCALE
        logs = logs - logs.max()
        probs = np.exp(logs)
        return probs / probs.sum()

    def labels(self) -> np.ndarray:
        """Argmax class per voxel, ties to the lowest id, void where unobserved"""
        labels = np.argmax(self.accumulators, axis=-1).astype(np.uint8)
        labels[self.counts == 0] = VOID_ID
        return labels


@dataclass(frozen=True, eq=False)
class GravityFrame:
    """Up direction and floor level of the reconstruction frame"""

    rotation: np.ndarray  # maps reconstruction-frame vectors to the inertial frame
    up: np.ndarray
    floor_level: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        up = np.array(self.up, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(up) - 1.0) > 1e-9:
            raise ValueError("up must be a unit vector")
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > 1e-9:
            raise ValueError("gravity rotation is not orthonormal")
        object.__setattr__(self, "up", up)
        object.__setattr__(self, "rotation", rotation)

    @classmethod
    def identity(cls, floor_level: float = 0.0) -> "GravityFrame":
        return cls(np.eye(3), np.array([0.0, 1.0, 0.0]), floor_level)

    def heights(self, world_points: np.ndarray) -> np.ndarray:
        return world_points @ self.up - self.floor_level
