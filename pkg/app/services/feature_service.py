"""
DHAC features: depth, height above floor, angle with gravity and curvature
"""

from typing import Optional, Tuple

import numpy as np

from app.core.logging import get_logger
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import FeatureImage
from app.models.volume import GravityFrame
from app.schemas.config import FeatureConfig
from app.services.render_service import backproject_depth

logger = get_logger(__name__)

MIN_WINDOW_POINTS = 6


def compute_normals(depth: np.ndarray, intrinsics: CameraIntrinsics,
                    discontinuity: float = 0.03) -> Tuple[np.ndarray, np.ndarray]:
    """Camera-frame unit normals (H, W, 3) from central-difference tangents, and validity.

    A pixel is valid when it and its four neighbours hold depth, it is not on
    the border and no neighbour differs in depth by more than `discontinuity` m.
    Normals face the camera.
    """
    points, valid_depth = backproject_depth(depth, intrinsics)
    height, width = valid_depth.shape
    normals = np.zeros((height, width, 3))
    valid = np.zeros((height, width), dtype=bool)
    if height < 3 or width < 3:
        return normals, valid

    center = points[1:-1, 1:-1]
    left, right = points[1:-1, :-2], points[1:-1, 2:]
    up, down = points[:-2, 1:-1], points[2:, 1:-1]
    ok = (
        valid_depth[1:-1, 1:-1]
        & valid_depth[1:-1, :-2] & valid_depth[1:-1, 2:]
        & valid_depth[:-2, 1:-1] & valid_depth[2:, 1:-1]
    )
    z = center[..., 2]
    for neighbour in (left, right, up, down):
        ok &= np.abs(neighbour[..., 2] - z) <= discontinuity

    n = np.cross(right - left, down - up)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n = n / np.where(norm > 0, norm, 1.0)[..., None]
    facing_away = np.einsum("...i,...i->...", n, center) > 0
    n[facing_away] *= -1.0
    n[~ok] = 0.0
    normals[1:-1, 1:-1] = n
    valid[1:-1, 1:-1] = ok
    return normals, valid


def compute_height(depth: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose,
                   gravity: GravityFrame) -> Tuple[np.ndarray, np.ndarray]:
    """Height above the floor (meters) along the gravity up axis"""
    points, valid = backproject_depth(depth, intrinsics)
    heights = gravity.heights(pose.to_world(points))
    heights[~valid] = 0.0
    return heights, valid


def compute_angle(normals: np.ndarray, gravity: GravityFrame) -> np.ndarray:
    """Unsigned angle in [0, pi/2] between the normal line and up; world-frame normals"""
    cos = np.abs(normals @ gravity.up)
    return np.arccos(np.clip(cos, 0.0, 1.0))


def surface_variation(points: np.ndarray) -> float:
    """lambda0 / (lambda0 + lambda1 + lambda2) of the point covariance"""
    points = np.asarray(points, dtype=np.float64)
    centered = points - points.mean(axis=0)
    cov = centered.T @ centered / len(points)
    eigen = np.linalg.eigvalsh(cov)
    total = eigen.sum()
    return float(max(eigen[0], 0.0) / total) if total > 0 else 0.0


def compute_curvature(depth: np.ndarray, intrinsics: CameraIntrinsics, window: int = 11,
                      discontinuity: float = 0.03) -> Tuple[np.ndarray, np.ndarray]:
    """Surface variation over a window x window neighbourhood of backprojected points.

    A neighbour at pixel offset (du, dv) takes part when its depth is within
    discontinuity * max(|du|, |dv|) of the center depth. Pixels with fewer than
    six participating points are invalid.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"curvature window must be odd and at least 3, got {window}")
    points, valid_depth = backproject_depth(depth, intrinsics)
    height, width = valid_depth.shape
    r = window // 2
    z = points[..., 2]

    padded_points = np.pad(points, ((r, r), (r, r), (0, 0)))
    padded_valid = np.pad(valid_depth, r)
    count = np.zeros((height, width))
    first = np.zeros((height, width, 3))
    second = np.zeros((height, width, 3, 3))
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            neighbour = padded_points[r + dv:r + dv + height, r + du:r + du + width]
            ok = padded_valid[r + dv:r + dv + height, r + du:r + du + width] & valid_depth
            if du or dv:
                ok &= np.abs(neighbour[..., 2] - z) <= discontinuity * max(abs(du), abs(dv))
            # relative to the center point for numerical range
            rel = np.where(ok[..., None], neighbour - points, 0.0)
            count += ok
            first += rel
            second += rel[..., :, None] * rel[..., None, :]

    curvature = np.zeros((height, width))
    valid = valid_depth & (count >= MIN_WINDOW_POINTS)
    n = count[valid][:, None]
    mean = first[valid] / n
    cov = second[valid] / n[..., None] - mean[:, :, None] * mean[:, None, :]
    eigen = np.linalg.eigvalsh(cov)
    total = eigen.sum(axis=1)
    curvature[valid] = np.where(total > 0, np.maximum(eigen[:, 0], 0.0) / np.where(total > 0, total, 1.0), 0.0)
    return curvature, valid


def assemble_dhac(depth: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose, gravity: GravityFrame,
                  config: Optional[FeatureConfig] = None) -> FeatureImage:
    """Normalized 4-channel network input with the conjunction of channel masks"""
    config = config or FeatureConfig()
    depth = np.asarray(depth, dtype=np.float64)
    normals_cam, normal_valid = compute_normals(depth, intrinsics, config.discontinuity)
    heights, depth_valid = compute_height(depth, intrinsics, pose, gravity)
    angle = compute_angle(normals_cam @ pose.rotation.T, gravity)
    curvature, curvature_valid = compute_curvature(depth, intrinsics, config.curvature_window,
                                                   config.discontinuity)
    mask = depth_valid & normal_valid & curvature_valid

    channels = np.stack([
        np.where(depth_valid, depth / 1000.0, 0.0) / config.depth_norm,
        np.clip(heights / config.height_norm, 0.0, 1.0),
        angle / (np.pi / 2),
        np.clip(3.0 * curvature, 0.0, 1.0),
    ])
    return FeatureImage(channels, mask)


def downsample_features(features: FeatureImage, factor: int) -> FeatureImage:
    """Mask-aware average pooling over factor x factor blocks (edges padded as masked)"""
    return FeatureImage(*pool_masked(features.channels, features.mask, factor))


def pool_masked(channels: np.ndarray, mask: np.ndarray, factor: int) -> Tuple[np.ndarray, np.ndarray]:
    """Average valid pixels of each block; output size is ceil(size / factor)"""
    if factor == 1:
        return channels.copy(), mask.copy()
    c, height, width = channels.shape
    out_h, out_w = -(-height // factor), -(-width // factor)
    pad = ((0, 0), (0, out_h * factor - height), (0, out_w * factor - width))
    weights = np.pad(mask, pad[1:]).astype(channels.dtype)
    values = np.pad(channels, pad) * weights
    sums = values.reshape(c, out_h, factor, out_w, factor).sum(axis=(2, 4))
    counts = weights.reshape(out_h, factor, out_w, factor).sum(axis=(1, 3))
    pooled_mask = counts > 0
    pooled = np.divide(sums, counts, out=np.zeros_like(sums), where=pooled_mask)
    return pooled, pooled_mask


class FeatureService:
    """DHAC extraction with a fixed configuration"""

    def __init__(self, intrinsics: CameraIntrinsics, config: Optional[FeatureConfig] = None):
        self.intrinsics = intrinsics
        self.config = config or FeatureConfig()

    def extract(self, depth: np.ndarray, pose: Pose, gravity: GravityFrame) -> FeatureImage:
        features = assemble_dhac(depth, self.intrinsics, pose, gravity, self.config)
        logger.debug("features.extracted", valid=int(features.mask.sum()))
        return features
