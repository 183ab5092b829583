"""
TSDF integration and raycasting
"""

from typing import Optional

import numpy as np
from scipy import ndimage

from app.core.logging import get_logger
from app.core.parallel import map_slices
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import SurfaceMap, depth_to_millimeters
from app.models.volume import TsdfVolume

logger = get_logger(__name__)

STEP_FRACTION = 0.5
OBSERVED_TOL = 1e-6
ROWS_PER_BLOCK = 16


def integrate(volume: TsdfVolume, depth: np.ndarray, intrinsics: CameraIntrinsics, pose: Pose,
              frame_weight: float = 1.0, workers: Optional[int] = None) -> TsdfVolume:
    """Fuse one depth frame (millimeters) into the volume in place.

    Each voxel center is matched to the pixel nearest its projection. Voxels
    more than mu behind the measured surface are left untouched.
    """
    if frame_weight <= 0:
        raise ValueError("frame_weight must be positive")
    depth_m = np.asarray(depth, dtype=np.float64) / 1000.0
    height, width = depth_m.shape
    grid = volume.grid
    mu = volume.mu
    updated = np.zeros(grid.dims[0], dtype=np.int64)

    def integrate_slab(x_start: int, x_stop: int) -> None:
        cam = pose.to_camera(grid.centers_slab(x_start, x_stop))
        z = cam[..., 2]
        in_front = z > 0
        safe_z = np.where(in_front, z, 1.0)
        u = np.rint(intrinsics.fx * cam[..., 0] / safe_z + intrinsics.cx)
        v = np.rint(intrinsics.fy * cam[..., 1] / safe_z + intrinsics.cy)
        hit = in_front & (u >= 0) & (u < width) & (v >= 0) & (v < height)
        measured = np.zeros(z.shape)
        measured[hit] = depth_m[v[hit].astype(np.int64), u[hit].astype(np.int64)]
        sdf = measured - z
        update = hit & np.isfinite(measured) & (measured > 0) & (sdf >= -mu)
        if not update.any():
            return
        f = np.clip(sdf[update] / mu, -1.0, 1.0)
        tsdf = volume.tsdf[x_start:x_stop]
        weight = volume.weight[x_start:x_stop]
        w_old = weight[update].astype(np.float64)
        t_old = tsdf[update].astype(np.float64)
        tsdf[update] = ((t_old * w_old + f * frame_weight) / (w_old + frame_weight)).astype(np.float32)
        weight[update] = np.minimum(w_old + frame_weight, volume.weight_max).astype(np.float32)
        updated[x_start:x_stop] = update.sum(axis=(1, 2))

    map_slices(integrate_slab, grid.dims[0], workers=workers)
    logger.debug("tsdf.integrated", updated_voxels=int(updated.sum()))
    return volume


def _sample(array: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear samples at continuous grid coordinates (n, 3)"""
    return ndimage.map_coordinates(array, coords.T, order=1, mode="nearest", prefilter=False)


def raycast(volume: TsdfVolume, intrinsics: CameraIntrinsics, pose: Pose,
            workers: Optional[int] = None) -> SurfaceMap:
    """Model surface seen from pose: first + to - zero crossing along each pixel ray.

    Samples are only trusted where all eight surrounding voxels are observed.
    Normals are normalized central-difference gradients of the tsdf, world frame.
    """
    height, width = intrinsics.shape
    depth_mm = np.zeros((height, width), dtype=np.float64)
    points = np.zeros((height, width, 3), dtype=np.float64)
    normals = np.zeros((height, width, 3), dtype=np.float64)
    valid = np.zeros((height, width), dtype=bool)
    if not volume.has_observations():
        logger.debug("tsdf.raycast_empty")
        return SurfaceMap(depth_to_millimeters(depth_mm / 1000.0), depth_mm, points, normals, valid)

    grid = volume.grid
    vs = grid.voxel_size
    step = STEP_FRACTION * vs
    tsdf = volume.tsdf.astype(np.float64)
    observed = volume.observed.astype(np.float64)
    lo, hi = grid.extent

    cam_dirs = intrinsics.ray_directions()
    scale = np.linalg.norm(cam_dirs, axis=-1)
    world_dirs = (cam_dirs / scale[..., None]) @ pose.rotation.T
    origin = pose.translation

    def sample_valid(coords: np.ndarray):
        f = _sample(tsdf, coords)
        ok = _sample(observed, coords) >= 1.0 - OBSERVED_TOL
        return f, ok

    def cast_rows(row_start: int, row_stop: int) -> None:
        dirs = world_dirs[row_start:row_stop].reshape(-1, 3)
        n = len(dirs)
        safe = np.where(dirs == 0.0, 1e-30, dirs)
        t0 = (lo - origin) / safe
        t1 = (hi - origin) / safe
        t_enter = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
        t_exit = np.maximum(t0, t1).min(axis=1)

        hit_t = np.full(n, np.nan)
        active = np.nonzero(t_enter < t_exit)[0]
        t_prev = t_enter[active]
        f_prev, ok_prev = sample_valid(grid.to_grid(origin + t_prev[:, None] * dirs[active]))
        while len(active):
            t_cur = t_prev + step
            inside = t_cur <= t_exit[active]
            active, t_prev, f_prev, ok_prev, t_cur = (
                active[inside], t_prev[inside], f_prev[inside], ok_prev[inside], t_cur[inside])
            if not len(active):
                break
            f_cur, ok_cur = sample_valid(grid.to_grid(origin + t_cur[:, None] * dirs[active]))
            crossing = ok_prev & ok_cur & (f_prev > 0) & (f_cur <= 0)
            if crossing.any():
                fp, fc = f_prev[crossing], f_cur[crossing]
                hit_t[active[crossing]] = t_prev[crossing] + step * fp / (fp - fc)
            keep = ~crossing
            active, t_prev, f_prev, ok_prev = active[keep], t_cur[keep], f_cur[keep], ok_cur[keep]

        found = np.nonzero(np.isfinite(hit_t))[0]
        if not len(found):
            return
        world = origin + hit_t[found, None] * dirs[found]
        coords = grid.to_grid(world)
        grad = np.empty((len(found), 3))
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = 1.0
            grad[:, axis] = _sample(tsdf, coords + offset) - _sample(tsdf, coords - offset)
        norm = np.linalg.norm(grad, axis=1)
        good = norm > 0
        found, world, grad, norm = found[good], world[good], grad[good], norm[good]

        block_scale = scale[row_start:row_stop].reshape(-1)
        rows, cols = np.divmod(found, width)
        rows = rows + row_start
        depth_mm[rows, cols] = hit_t[found] / block_scale[found] * 1000.0
        points[rows, cols] = world
        normals[rows, cols] = grad / norm[:, None]
        valid[rows, cols] = True

    map_slices(cast_rows, height, workers=workers, chunk=ROWS_PER_BLOCK)
    logger.debug("tsdf.raycast", valid=int(valid.sum()))
    return SurfaceMap(depth_to_millimeters(depth_mm / 1000.0), depth_mm, points, normals, valid)
