"""
Camera tracking (projective point-to-plane ICP) and gravity alignment
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial.transform import Rotation

from app.core.errors import DegenerateScatterError, InsufficientSamplesError, TrackingLostError
from app.core.logging import get_logger
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import SurfaceMap, depth_to_millimeters
from app.models.volume import GravityFrame
from app.services.feature_service import compute_normals
from app.services.render_service import backproject_depth

logger = get_logger(__name__)

DISTANCE_GATE = 0.1
NORMAL_GATE_DEG = 30.0
MAX_ITERATIONS = 20
CONVERGENCE = 1e-6
MIN_CORRESPONDENCES = 100

GRAVITY_ANGLE_DEG = 15.0
GRAVITY_MAX_ITERATIONS = 10
GRAVITY_CONVERGENCE_DEG = 0.01
MIN_GRAVITY_SAMPLES = 1000
EIGEN_GAP = 1e-6
FLOOR_PERCENTILE = 1.0


def surface_from_depth(depth: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose,
                       discontinuity: float = 0.03) -> SurfaceMap:
    """World-frame points and normals of a depth frame at a known pose"""
    depth = np.asarray(depth, dtype=np.float64)
    points, _ = backproject_depth(depth, intrinsics)
    normals, valid = compute_normals(depth, intrinsics, discontinuity)
    world_points = pose.to_world(points)
    world_normals = normals @ pose.rotation.T
    world_points[~valid] = 0.0
    world_normals[~valid] = 0.0
    return SurfaceMap(depth_to_millimeters(depth / 1000.0), np.where(valid, depth, 0.0),
                      world_points, world_normals, valid)


@dataclass
class TrackingStats:
    iterations: int = 0
    correspondences: int = 0
    residual: float = 0.0
    history: List[float] = field(default_factory=list)


class IcpTracker:
    """Frame-to-model tracking against a raycast model surface"""

    def __init__(self, intrinsics: CameraIntrinsics, max_iterations: int = MAX_ITERATIONS,
                 distance_gate: float = DISTANCE_GATE, normal_gate_deg: float = NORMAL_GATE_DEG,
                 min_correspondences: int = MIN_CORRESPONDENCES, discontinuity: float = 0.03):
        self.intrinsics = intrinsics
        self.max_iterations = max_iterations
        self.distance_gate = distance_gate
        self.normal_cos = np.cos(np.deg2rad(normal_gate_deg))
        self.min_correspondences = min_correspondences
        self.discontinuity = discontinuity
        self.last_stats = TrackingStats()

    def _associate(self, model: SurfaceMap, model_pose: Pose, live_points: np.ndarray,
                   live_normals: np.ndarray, rotation: np.ndarray, translation: np.ndarray):
        """Project live points into the model view; gate by distance and normal angle"""
        p = live_points @ rotation.T + translation
        n_live = live_normals @ rotation.T
        cam = model_pose.to_camera(p)
        z = cam[:, 2]
        front = z > 0
        safe_z = np.where(front, z, 1.0)
        u = np.rint(self.intrinsics.fx * cam[:, 0] / safe_z + self.intrinsics.cx)
        v = np.rint(self.intrinsics.fy * cam[:, 1] / safe_z + self.intrinsics.cy)
        height, width = model.shape
        ok = front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
        ui = np.where(ok, u, 0).astype(np.int64)
        vi = np.where(ok, v, 0).astype(np.int64)
        ok &= model.valid[vi, ui]
        q = model.points[vi, ui]
        n = model.normals[vi, ui]
        ok &= np.linalg.norm(p - q, axis=1) < self.distance_gate
        ok &= np.einsum("ij,ij->i", n_live, n) > self.normal_cos
        return p[ok], q[ok], n[ok]

    def track(self, model: SurfaceMap, live_depth: np.ndarray, init_pose: Pose,
              model_pose: Optional[Pose] = None) -> Pose:
        """Refine init_pose so the live frame aligns with the model surface.

        model is the surface seen from model_pose (defaults to init_pose).
        """
        model_pose = model_pose or init_pose
        live_depth = np.asarray(live_depth, dtype=np.float64)
        points, _ = backproject_depth(live_depth, self.intrinsics)
        normals, valid = compute_normals(live_depth, self.intrinsics, self.discontinuity)
        live_points, live_normals = points[valid], normals[valid]

        rotation = init_pose.rotation.copy()
        translation = init_pose.translation.copy()
        stats = TrackingStats()
        previous = None
        for iteration in range(1, self.max_iterations + 1):
            p, q, n = self._associate(model, model_pose, live_points, live_normals, rotation, translation)
            if len(p) < self.min_correspondences:
                self.last_stats = stats
                raise TrackingLostError(
                    f"only {len(p)} correspondences (need {self.min_correspondences})"
                )
            b = np.einsum("ij,ij->i", q - p, n)
            residual = float(np.mean(b * b))
            stats.iterations, stats.correspondences, stats.residual = iteration, len(p), residual
            stats.history.append(residual)
            if residual == 0.0:
                break
            if previous is not None and abs(previous - residual) / max(previous, 1e-300) < CONVERGENCE:
                break
            previous = residual

            jacobian = np.hstack([np.cross(p, n), n])
            x = np.linalg.solve(jacobian.T @ jacobian, jacobian.T @ b)
            if not np.any(x):
                break
            delta = Rotation.from_rotvec(x[:3]).as_matrix()
            rotation = delta @ rotation
            translation = delta @ translation + x[3:]
            # keep the rotation exactly orthonormal
            u_, _, vt = np.linalg.svd(rotation)
            rotation = u_ @ vt

        self.last_stats = stats
        logger.debug("icp.tracked", iterations=stats.iterations, correspondences=stats.correspondences,
                     residual=stats.residual)
        return Pose(rotation, translation)


def icp_track(model: SurfaceMap, live_depth: np.ndarray, init_pose: Pose, intrinsics: CameraIntrinsics,
              model_pose: Optional[Pose] = None, max_iterations: int = MAX_ITERATIONS) -> Pose:
    return IcpTracker(intrinsics, max_iterations=max_iterations).track(model, live_depth, init_pose, model_pose)


def _rotation_to_y(up: np.ndarray) -> np.ndarray:
    """Rotation taking `up` onto +Y"""
    target = np.array([0.0, 1.0, 0.0])
    axis = np.cross(up, target)
    sin = np.linalg.norm(axis)
    cos = float(np.dot(up, target))
    if sin < 1e-15:
        if cos > 0:
            return np.eye(3)
        return Rotation.from_rotvec([np.pi, 0.0, 0.0]).as_matrix()
    return Rotation.from_rotvec(axis / sin * np.arctan2(sin, cos)).as_matrix()


def align_gravity(normals: np.ndarray, points: Optional[np.ndarray] = None,
                  initial_up: Optional[np.ndarray] = None,
                  max_iterations: int = GRAVITY_MAX_ITERATIONS) -> GravityFrame:
    """Estimate up from surface normals that are either near-vertical or near-horizontal.

    Each round splits the normals into a parallel set (within 15 degrees of
    +-up) and an orthogonal set (within 15 degrees of horizontal) and takes
    the smallest eigenvector of S_orth - S_par as the new up.
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if len(normals) < MIN_GRAVITY_SAMPLES:
        raise InsufficientSamplesError(
            f"{len(normals)} normal samples, need at least {MIN_GRAVITY_SAMPLES}"
        )
    up = np.array([0.0, 1.0, 0.0]) if initial_up is None else np.asarray(initial_up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    cos_par = np.cos(np.deg2rad(GRAVITY_ANGLE_DEG))
    sin_orth = np.sin(np.deg2rad(GRAVITY_ANGLE_DEG))

    iterations = 0
    for iterations in range(1, max_iterations + 1):
        d = np.abs(normals @ up)
        parallel = normals[d > cos_par]
        orthogonal = normals[d < sin_orth]
        scatter = orthogonal.T @ orthogonal - parallel.T @ parallel
        eigen, vectors = np.linalg.eigh(scatter)
        scale = np.abs(eigen).max()
        if scale == 0 or eigen[1] - eigen[0] <= EIGEN_GAP * scale:
            raise DegenerateScatterError("normal scatter has no unique minimum direction")
        new_up = vectors[:, 0]
        if new_up @ up < 0:
            new_up = -new_up
        change = np.degrees(np.arccos(np.clip(new_up @ up, -1.0, 1.0)))
        up = new_up / np.linalg.norm(new_up)
        if change < GRAVITY_CONVERGENCE_DEG:
            break

    floor_level = 0.0
    if points is not None and len(points):
        floor_level = float(np.percentile(np.asarray(points).reshape(-1, 3) @ up, FLOOR_PERCENTILE))
    logger.debug("gravity.aligned", up=up.round(6).tolist(), iterations=iterations, floor=floor_level)
    return GravityFrame(_rotation_to_y(up), up, floor_level, iterations)
