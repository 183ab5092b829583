"""
Pinhole ray-traced rendering of depth and annotation images
"""

from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numba
import numpy as np

from app.core.errors import BehindCameraError, ConfigError, InvalidDepthError, InvalidRayError
from app.core.logging import get_logger
from app.core.parallel import map_slices
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import DepthImage, LabelImage, depth_to_millimeters
from app.models.scene import VOID_ID, Scene, TriangleSoup
from app.schemas.config import OrbitSpec

logger = get_logger(__name__)

HIT_EPSILON = 1e-6
PARALLEL_EPSILON = 1e-12
LEAF_SIZE = 4
BOX_PADDING = 1e-7
ROWS_PER_BLOCK = 16
STACK_SIZE = 128
UNIT_TOL = 1e-9


# Camera geometry

def project(point: Sequence[float], intrinsics: CameraIntrinsics) -> Tuple[float, float]:
    """Camera-frame point to pixel coordinates"""
    x, y, z = (float(c) for c in point)
    if z <= 0:
        raise BehindCameraError(f"point has camera depth {z}")
    return intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy


def backproject(u: float, v: float, depth_mm: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Pixel plus millimeter Z-depth to a camera-frame point in meters"""
    if not depth_mm > 0:
        raise InvalidDepthError(f"depth {depth_mm} mm is not a measurement")
    z = depth_mm / 1000.0
    return np.array([(u - intrinsics.cx) * z / intrinsics.fx, (v - intrinsics.cy) * z / intrinsics.fy, z])


def backproject_depth(depth_mm: np.ndarray, intrinsics: CameraIntrinsics) -> Tuple[np.ndarray, np.ndarray]:
    """Camera-frame points (H, W, 3) in meters and validity mask of a depth raster.

    Accepts integer or float millimeters; zero or non-finite depth is invalid.
    """
    depth = np.asarray(depth_mm, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    z = np.where(valid, depth, 0.0) / 1000.0
    points = intrinsics.ray_directions() * z[..., None]
    return points, valid


def look_at(eye: Sequence[float], target: Sequence[float],
            up: Sequence[float] = (0.0, 1.0, 0.0)) -> Pose:
    """Camera-to-world pose at eye looking at target (x right, y down, z forward)"""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("look_at target coincides with eye")
    z = forward / norm
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        # looking straight along up
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.column_stack([x, y, z]), eye)


def generate_trajectory(bounds: Tuple[np.ndarray, np.ndarray], n_frames: int,
                        orbit: Optional[OrbitSpec] = None) -> List[Pose]:
    """Evenly spaced look-at poses on a horizontal circle around the bounds center.

    Camera height and target height are measured from the bottom of bounds.
    """
    orbit = orbit or OrbitSpec()
    if n_frames < 1:
        raise ConfigError(f"n_frames must be at least 1, got {n_frames}")
    if orbit.radius <= 0:
        raise ConfigError(f"orbit radius must be positive, got {orbit.radius}")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bounds)
    centroid = 0.5 * (lo + hi)
    target = centroid.copy()
    if orbit.target_height is not None:
        target[1] = lo[1] + orbit.target_height
    poses = []
    for i in range(n_frames):
        theta = np.deg2rad(orbit.start_deg + orbit.sweep_deg * i / n_frames)
        eye = np.array([
            centroid[0] + orbit.radius * np.cos(theta),
            lo[1] + orbit.height,
            centroid[2] + orbit.radius * np.sin(theta),
        ])
        poses.append(look_at(eye, target))
    return poses


# Bounding-volume hierarchy

@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened BVH; node i is a leaf when left[i] < 0, covering order[start:start+count]"""

    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.lo)


def build_bvh(soup: TriangleSoup, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split over the longest centroid axis"""
    tri_lo = np.minimum(np.minimum(soup.v0, soup.v1), soup.v2)
    tri_hi = np.maximum(np.maximum(soup.v0, soup.v1), soup.v2)
    centroids = (soup.v0 + soup.v1 + soup.v2) / 3.0
    order = np.arange(len(soup), dtype=np.int64)

    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(begin: int, end: int) -> int:
        members = order[begin:end]
        lo.append(tri_lo[members].min(axis=0) - BOX_PADDING)
        hi.append(tri_hi[members].max(axis=0) + BOX_PADDING)
        left.append(-1)
        right.append(-1)
        start.append(begin)
        count.append(end - begin)
        return len(lo) - 1

    if len(soup):
        stack = [(new_node(0, len(soup)), 0, len(soup))]
        while stack:
            node, begin, end = stack.pop()
            if end - begin <= leaf_size:
                continue
            members = order[begin:end]
            spread = centroids[members].max(axis=0) - centroids[members].min(axis=0)
            axis = int(np.argmax(spread))
            sorted_members = members[np.argsort(centroids[members, axis], kind="stable")]
            order[begin:end] = sorted_members
            mid = begin + (end - begin) // 2
            left[node] = new_node(begin, mid)
            right[node] = new_node(mid, end)
            count[node] = 0
            stack.append((right[node], mid, end))
            stack.append((left[node], begin, mid))

    as_array = (lambda values, dtype, shape: np.asarray(values, dtype=dtype).reshape(shape))
    return Bvh(
        lo=as_array(lo, np.float64, (-1, 3)),
        hi=as_array(hi, np.float64, (-1, 3)),
        left=as_array(left, np.int64, (-1,)),
        right=as_array(right, np.int64, (-1,)),
        start=as_array(start, np.int64, (-1,)),
        count=as_array(count, np.int64, (-1,)),
        order=order,
    )


@lru_cache(maxsize=8)
def scene_bvh(scene: Scene) -> Bvh:
    """BVH of a scene, built once per scene object"""
    bvh = build_bvh(scene.triangle_soup())
    logger.debug("bvh.built", triangles=scene.num_triangles, nodes=bvh.num_nodes)
    return bvh


# Intersection kernels

def ray_triangle(origins: np.ndarray, dirs: np.ndarray, v0: np.ndarray, v1: np.ndarray,
                 v2: np.ndarray) -> np.ndarray:
    """Moller-Trumbore for paired rays / triangles; inf where there is no hit"""
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(dirs, e2)
    det = np.einsum("...i,...i->...", e1, p)
    ok = np.abs(det) >= PARALLEL_EPSILON
    inv = np.divide(1.0, det, out=np.zeros_like(det), where=ok)
    s = origins - v0
    u = np.einsum("...i,...i->...", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("...i,...i->...", dirs, q) * inv
    t = np.einsum("...i,...i->...", e2, q) * inv
    hit = ok & (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > HIT_EPSILON)
    return np.where(hit, t, np.inf)


@numba.njit(cache=True, nogil=True)
def _hit_triangle(ox, oy, oz, dx, dy, dz, a, b, c):
    e1x, e1y, e1z = b[0] - a[0], b[1] - a[1], b[2] - a[2]
    e2x, e2y, e2z = c[0] - a[0], c[1] - a[1], c[2] - a[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < PARALLEL_EPSILON:
        return np.inf
    inv = 1.0 / det
    sx, sy, sz = ox - a[0], oy - a[1], oz - a[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t > HIT_EPSILON:
        return t
    return np.inf


@numba.njit(cache=True, nogil=True)
def _box_entry(lo, hi, ox, oy, oz, ix, iy, iz, limit):
    """Entry distance of a ray into a box, inf when missed or beyond limit"""
    t0, t1 = (lo[0] - ox) * ix, (hi[0] - ox) * ix
    near, far = min(t0, t1), max(t0, t1)
    t0, t1 = (lo[1] - oy) * iy, (hi[1] - oy) * iy
    near, far = max(near, min(t0, t1)), min(far, max(t0, t1))
    t0, t1 = (lo[2] - oz) * iz, (hi[2] - oz) * iz
    near, far = max(near, min(t0, t1)), min(far, max(t0, t1))
    if near > far or far < HIT_EPSILON or near > limit:
        return np.inf
    return near


@numba.njit(cache=True, nogil=True)
def _safe_inverse(d):
    return 1.0 / (d if d != 0.0 else 1e-30)


@numba.njit(cache=True, nogil=True)
def _trace_brute(origins, dirs, v0, v1, v2, best_t, best_tri):
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        best, best_id = np.inf, -1
        # ascending ids with a strict < keep the lowest triangle on ties
        for tri in range(v0.shape[0]):
            t = _hit_triangle(ox, oy, oz, dx, dy, dz, v0[tri], v1[tri], v2[tri])
            if t < best:
                best, best_id = t, tri
        best_t[r] = best
        best_tri[r] = best_id


@numba.njit(cache=True, nogil=True)
def _trace_bvh(origins, dirs, v0, v1, v2, lo, hi, left, right, start, count, order, best_t, best_tri):
    stack = np.empty(STACK_SIZE, dtype=np.int64)
    entry = np.empty(STACK_SIZE, dtype=np.float64)
    for r in range(origins.shape[0]):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = _safe_inverse(dx), _safe_inverse(dy), _safe_inverse(dz)
        best, best_id = np.inf, -1
        top = 0
        root = _box_entry(lo[0], hi[0], ox, oy, oz, ix, iy, iz, best)
        if root != np.inf:
            stack[0] = 0
            entry[0] = root
            top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            # equal entry still visited so equal-t ties reach the lower id
            if entry[top] > best:
                continue
            if left[node] < 0:
                for k in range(start[node], start[node] + count[node]):
                    tri = order[k]
                    t = _hit_triangle(ox, oy, oz, dx, dy, dz, v0[tri], v1[tri], v2[tri])
                    if t < best or (t == best and tri < best_id):
                        best, best_id = t, tri
                continue
            near, far = left[node], right[node]
            t_near = _box_entry(lo[near], hi[near], ox, oy, oz, ix, iy, iz, best)
            t_far = _box_entry(lo[far], hi[far], ox, oy, oz, ix, iy, iz, best)
            if t_far < t_near:
                near, far, t_near, t_far = far, near, t_far, t_near
            # far child below near child, so the nearer subtree is searched first
            if t_far != np.inf:
                stack[top] = far
                entry[top] = t_far
                top += 1
            if t_near != np.inf:
                stack[top] = near
                entry[top] = t_near
                top += 1
        best_t[r] = best
        best_tri[r] = best_id


def _intersect_brute(origins: np.ndarray, dirs: np.ndarray, soup: TriangleSoup) -> Tuple[np.ndarray, np.ndarray]:
    best_t = np.full(len(origins), np.inf)
    best_tri = np.full(len(origins), -1, dtype=np.int64)
    if len(soup) and len(origins):
        _trace_brute(origins, dirs, soup.v0, soup.v1, soup.v2, best_t, best_tri)
    return best_t, best_tri


def _intersect_bvh(origins: np.ndarray, dirs: np.ndarray, soup: TriangleSoup,
                   bvh: Bvh) -> Tuple[np.ndarray, np.ndarray]:
    best_t = np.full(len(origins), np.inf)
    best_tri = np.full(len(origins), -1, dtype=np.int64)
    if bvh.num_nodes and len(origins):
        _trace_bvh(origins, dirs, soup.v0, soup.v1, soup.v2, bvh.lo, bvh.hi, bvh.left, bvh.right,
                   bvh.start, bvh.count, bvh.order, best_t, best_tri)
    return best_t, best_tri


def intersect_rays(origins: np.ndarray, dirs: np.ndarray, scene: Scene,
                   use_bvh: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and global triangle id per ray (inf / -1 when missed)"""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    soup = scene.triangle_soup()
    if use_bvh:
        return _intersect_bvh(origins, dirs, soup, scene_bvh(scene))
    return _intersect_brute(origins, dirs, soup)


@dataclass(frozen=True)
class RayHit:
    t: float
    mesh_index: int
    triangle_index: int


def intersect(origin: Sequence[float], direction: Sequence[float], scene: Scene,
              use_bvh: bool = True) -> Optional[RayHit]:
    """Nearest intersection of one ray with the scene"""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > UNIT_TOL:
        raise InvalidRayError(f"ray direction norm {np.linalg.norm(direction)} is not 1")
    t, tri = intersect_rays(np.asarray(origin, dtype=np.float64)[None], direction[None], scene, use_bvh)
    if tri[0] < 0:
        return None
    soup = scene.triangle_soup()
    return RayHit(float(t[0]), int(soup.mesh_index[tri[0]]), int(soup.local_index[tri[0]]))


# Rendering

def render_frame_metric(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose, use_bvh: bool = True,
                        workers: Optional[int] = None) -> Tuple[np.ndarray, LabelImage]:
    """Float camera-Z depth in meters (0 on miss) and class labels per pixel"""
    height, width = intrinsics.shape
    cam_dirs = intrinsics.ray_directions()
    scale = np.linalg.norm(cam_dirs, axis=-1)
    world_dirs = (cam_dirs / scale[..., None]) @ pose.rotation.T
    class_of = scene.triangle_soup().class_id

    depth = np.zeros((height, width), dtype=np.float64)
    labels = np.full((height, width), VOID_ID, dtype=np.uint8)
    if use_bvh:
        scene_bvh(scene)

    def render_rows(row_start: int, row_stop: int) -> None:
        dirs = world_dirs[row_start:row_stop].reshape(-1, 3)
        origins = np.broadcast_to(pose.translation, dirs.shape)
        t, tri = intersect_rays(origins, dirs, scene, use_bvh)
        hit = tri >= 0
        z = np.zeros(len(t))
        z[hit] = t[hit] / scale[row_start:row_stop].reshape(-1)[hit]
        lab = np.full(len(t), VOID_ID, dtype=np.uint8)
        lab[hit] = class_of[tri[hit]]
        depth[row_start:row_stop] = z.reshape(-1, width)
        labels[row_start:row_stop] = lab.reshape(-1, width)

    map_slices(render_rows, height, workers=workers, chunk=ROWS_PER_BLOCK)
    return depth, labels


def render_frame(scene: Scene, intrinsics: CameraIntrinsics, pose: Pose, use_bvh: bool = True,
                 workers: Optional[int] = None) -> Tuple[DepthImage, LabelImage]:
    """Millimeter depth and labels; no-hit pixels are (0, void)"""
    depth_m, labels = render_frame_metric(scene, intrinsics, pose, use_bvh, workers)
    return depth_to_millimeters(depth_m), labels


class RenderService:
    """Renders a trajectory of one scene"""

    def __init__(self, scene: Scene, intrinsics: CameraIntrinsics, use_bvh: bool = True):
        self.scene = scene
        self.intrinsics = intrinsics
        self.use_bvh = use_bvh

    def render(self, pose: Pose) -> Tuple[DepthImage, LabelImage]:
        return render_frame(self.scene, self.intrinsics, pose, self.use_bvh)

    def render_sequence(self, trajectory: Sequence[Pose]):
        """Yield (index, depth, labels, pose) for every pose"""
        for index, pose in enumerate(trajectory):
            depth, labels = self.render(pose)
            logger.debug("render.frame", index=index, valid=int((depth > 0).sum()))
            yield index, depth, labels, pose
