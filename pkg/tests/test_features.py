import numpy as np
import pytest
from scipy.ndimage import binary_erosion
from scipy.spatial.transform import Rotation

from app.models.camera import Pose
from app.models.images import FeatureImage
from app.models.volume import GravityFrame
from app.schemas.config import FeatureConfig, RoomSpec
from app.services.feature_service import (
    assemble_dhac, compute_angle, compute_curvature, compute_height, compute_normals, downsample_features,
    pool_masked, surface_variation,
)
from app.services.render_service import backproject_depth, look_at, render_frame
from app.services.scene_service import generate_room


def test_surface_variation_bounds():
    rng = np.random.default_rng(1)
    plane = np.column_stack([rng.uniform(size=50), rng.uniform(size=50), np.zeros(50)])
    assert surface_variation(plane) == pytest.approx(0.0, abs=1e-12)
    cloud = rng.normal(size=(2000, 3))
    assert 0.25 < surface_variation(cloud) <= 1.0 / 3.0 + 1e-12


def test_floor_features(empty_room, small_intrinsics, floor_pose):
    depth, _ = render_frame(empty_room, small_intrinsics, floor_pose)
    normals, valid = compute_normals(depth, small_intrinsics)
    assert valid[1:-1, 1:-1].all() and not valid[0].any()
    world = normals[valid] @ floor_pose.rotation.T
    np.testing.assert_allclose(world, np.tile([0.0, 1.0, 0.0], (len(world), 1)), atol=1e-9)

    gravity = GravityFrame.identity()
    heights, height_valid = compute_height(depth, small_intrinsics, floor_pose, gravity)
    assert height_valid.all()
    np.testing.assert_allclose(heights, 0.0, atol=1e-9)
    np.testing.assert_allclose(compute_angle(world, gravity), 0.0, atol=1e-6)

    curvature, curvature_valid = compute_curvature(depth, small_intrinsics, window=5)
    assert curvature_valid.all()
    np.testing.assert_allclose(curvature, 0.0, atol=1e-9)


def test_wall_angle_is_right_angle():
    gravity = GravityFrame.identity()
    angles = compute_angle(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]]), gravity)
    np.testing.assert_allclose(angles, [np.pi / 2, np.pi / 2, 0.0])


def test_curvature_matches_window_oracle(furnished_room, small_intrinsics, room_pose):
    depth, _ = render_frame(furnished_room, small_intrinsics, room_pose)
    window, disc = 5, 0.03
    curvature, valid = compute_curvature(depth, small_intrinsics, window=window, discontinuity=disc)
    points, depth_valid = backproject_depth(depth, small_intrinsics)
    r = window // 2
    height, width = depth.shape
    checked = 0
    for v in range(0, height, 7):
        for u in range(0, width, 9):
            if not depth_valid[v, u]:
                continue
            neighbourhood = []
            for dv in range(-r, r + 1):
                for du in range(-r, r + 1):
                    y, x = v + dv, u + du
                    if not (0 <= y < height and 0 <= x < width) or not depth_valid[y, x]:
                        continue
                    if abs(points[y, x, 2] - points[v, u, 2]) <= disc * max(abs(du), abs(dv)):
                        neighbourhood.append(points[y, x])
            assert valid[v, u] == (len(neighbourhood) >= 6)
            if valid[v, u]:
                assert curvature[v, u] == pytest.approx(surface_variation(np.array(neighbourhood)), abs=1e-7)
                checked += 1
    assert checked > 20


def test_curvature_window_must_be_odd(empty_room, small_intrinsics, floor_pose):
    depth, _ = render_frame(empty_room, small_intrinsics, floor_pose)
    with pytest.raises(ValueError):
        compute_curvature(depth, small_intrinsics, window=4)


def test_curvature_is_high_at_a_corner(empty_room, small_intrinsics):
    # looking into the corner where two walls meet the floor
    pose = look_at((2.5, 1.0, 2.5), (4.0, 0.0, 4.0))
    depth, _ = render_frame(empty_room, small_intrinsics, pose)
    curvature, valid = compute_curvature(depth, small_intrinsics, window=5)
    assert curvature[valid].max() > 0.05
    assert np.median(curvature[valid]) < 0.01


def test_dhac_channels_are_normalized(furnished_room, small_intrinsics, room_pose):
    depth, labels = render_frame(furnished_room, small_intrinsics, room_pose)
    features = assemble_dhac(depth, small_intrinsics, room_pose, GravityFrame.identity(),
                             FeatureConfig(curvature_window=5))
    assert features.channels.shape == (4,) + small_intrinsics.shape
    assert features.channels.dtype == np.float32
    assert features.mask.any() and not features.mask[depth == 0].any()
    assert features.channels.min() >= 0.0 and features.channels.max() <= 1.0
    # floor pixels whose whole 3x3 neighbourhood is floor
    floor = features.mask & binary_erosion(labels == 2, structure=np.ones((3, 3), dtype=bool))
    assert floor.sum() > 50
    assert np.all(features.channels[1][floor] < 0.02)
    assert np.all(features.channels[2][floor] < 0.05)
    np.testing.assert_allclose(features.channels[0][features.mask], depth[features.mask] / 8000.0, rtol=1e-6)


def test_masked_pooling_averages_valid_pixels_only():
    channels = np.arange(9, dtype=np.float32).reshape(1, 3, 3)
    mask = np.array([[True, False, True], [False, False, True], [True, True, False]])
    pooled, pooled_mask = pool_masked(channels, mask, 2)
    assert pooled.shape == (1, 2, 2)
    assert pooled_mask.tolist() == [[True, True], [True, False]]
    # top-left block holds only pixel 0, top-right 2 and 5, bottom-left 6 and 7
    assert pooled[0].tolist() == [[0.0, 3.5], [6.5, 0.0]]

    features = downsample_features(FeatureImage(np.repeat(channels, 4, axis=0), mask), 2)
    assert features.shape == (2, 2)
    assert features.channels[3, 0, 1] == 3.5


def _yawed(pose, degrees):
    yaw = Rotation.from_euler("y", degrees, degrees=True).as_matrix()
    return Pose(yaw @ pose.rotation, yaw @ pose.translation)


def test_yaw_leaves_height_and_angle_unchanged(furnished_room, small_intrinsics, room_pose):
    depth, _ = render_frame(furnished_room, small_intrinsics, room_pose)
    gravity = GravityFrame.identity()
    config = FeatureConfig(curvature_window=5)
    reference = assemble_dhac(depth, small_intrinsics, room_pose, gravity, config)
    for degrees in (37.0, -120.0):
        turned = assemble_dhac(depth, small_intrinsics, _yawed(room_pose, degrees), gravity, config)
        np.testing.assert_array_equal(turned.mask, reference.mask)
        assert np.abs(turned.channels[1:3] - reference.channels[1:3]).max() < 1e-3


def _plane_depth(intrinsics, pose, point, normal):
    """Float millimeter depth of the plane through point with the given normal"""
    dirs = intrinsics.ray_directions() @ pose.rotation.T
    t = (np.asarray(point) - pose.translation) @ normal / (dirs @ normal)
    return t * 1000.0


@pytest.mark.parametrize("tilt_deg", [30.0, 45.0])
def test_inclined_plane_normal_and_angle(small_intrinsics, floor_pose, tilt_deg):
    theta = np.deg2rad(tilt_deg)
    normal = np.array([0.0, np.cos(theta), np.sin(theta)])
    depth = _plane_depth(small_intrinsics, floor_pose, (2.0, 0.0, 2.0), normal)
    assert depth.min() > 0

    normals, valid = compute_normals(depth, small_intrinsics, discontinuity=0.2)
    assert valid[1:-1, 1:-1].all()
    world = normals[valid] @ floor_pose.rotation.T
    np.testing.assert_allclose(world, np.tile(normal, (len(world), 1)), atol=1e-6)
    np.testing.assert_allclose(compute_angle(world, GravityFrame.identity()), theta, atol=1e-6)


def test_table_top_height(small_intrinsics):
    scene = generate_room(RoomSpec(n_chairs=0, n_tables=1, seed=0))
    table = scene.meshes[scene.labels.index(1)]
    lo, hi = table.bounds()
    center = 0.5 * (lo + hi)
    pose = look_at((center[0], 2.0, center[2]), (center[0], 0.0, center[2]))
    depth, labels = render_frame(scene, small_intrinsics, pose)
    heights, valid = compute_height(depth, small_intrinsics, pose, GravityFrame.identity())
    normals, normal_valid = compute_normals(depth, small_intrinsics)
    # the upward faces only; leg sides show below the rim
    facing_up = normal_valid & ((normals @ pose.rotation.T)[..., 1] > 0.9)
    on_table = valid & facing_up & (labels == 1)
    assert on_table.sum() > 100
    assert heights[on_table].min() >= 0.72 and heights[on_table].max() <= 0.78


def test_ceiling_height_is_room_height(empty_room, small_intrinsics):
    pose = look_at((2.0, 1.0, 2.0), (2.0, 2.5, 2.0))
    depth, labels = render_frame(empty_room, small_intrinsics, pose)
    heights, valid = compute_height(depth, small_intrinsics, pose, GravityFrame.identity())
    ceiling = valid & (labels == 3)
    assert ceiling.mean() > 0.9
    np.testing.assert_allclose(heights[ceiling], 2.5, atol=1e-3)


def test_curvature_unchanged_by_uniform_scaling(furnished_room, small_intrinsics, room_pose):
    depth, _ = render_frame(furnished_room, small_intrinsics, room_pose)
    depth = depth.astype(np.float64)
    curvature, valid = compute_curvature(depth, small_intrinsics, window=5, discontinuity=0.03)
    scaled, scaled_valid = compute_curvature(2.0 * depth, small_intrinsics, window=5, discontinuity=0.06)
    np.testing.assert_array_equal(scaled_valid, valid)
    np.testing.assert_allclose(scaled[valid], curvature[valid], atol=1e-9)


def test_depth_step_gates_normals_and_curvature(small_intrinsics):
    depth = np.full(small_intrinsics.shape, 1000.0)
    depth[:, 40:] = 2000.0
    _, valid = compute_normals(depth, small_intrinsics)
    assert not valid[:, 39:41].any()
    assert valid[1:-1, 38].all() and valid[1:-1, 41].all()

    # neighbours across the step never join the window
    curvature, curvature_valid = compute_curvature(depth, small_intrinsics, window=5)
    assert curvature_valid.all()
    np.testing.assert_allclose(curvature, 0.0, atol=1e-9)

    features = assemble_dhac(depth, small_intrinsics, Pose.identity(), GravityFrame.identity(),
                             FeatureConfig(curvature_window=5))
    assert not features.mask[:, 39:41].any()
