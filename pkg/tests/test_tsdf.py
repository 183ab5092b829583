import numpy as np
import pytest

from app.models.camera import CameraIntrinsics, Pose
from app.models.volume import TsdfVolume, VoxelGrid
from app.schemas.config import OrbitSpec, RoomSpec
from app.services.render_service import generate_trajectory, look_at, render_frame, render_frame_metric
from app.services.scene_service import generate_room
from app.services.tsdf_service import integrate, raycast


def _room_volume(scene, dim=48, weight_max=100.0):
    return TsdfVolume.for_bounds(scene.bounds, dim=dim, margin=0.2, mu_voxels=4.0, weight_max=weight_max)


def _round_trip_fraction(scene, intrinsics, poses, held_out, dim):
    volume = _room_volume(scene, dim=dim)
    for pose in poses:
        depth, _ = render_frame(scene, intrinsics, pose)
        integrate(volume, depth, intrinsics, pose)
    surface = raycast(volume, intrinsics, held_out)
    truth_m, _ = render_frame_metric(scene, intrinsics, held_out)
    both = surface.valid & (truth_m > 0)
    error = np.abs(surface.depth_mm[both] / 1000.0 - truth_m[both])
    return both.mean(), float(np.mean(error <= 2 * volume.voxel_size))


def test_single_frame_sign_change(empty_room, small_intrinsics):
    pose = look_at((2.0, 1.25, 1.0), (2.0, 1.25, 4.0))
    volume = _room_volume(empty_room)
    depth, _ = render_frame(empty_room, small_intrinsics, pose)
    integrate(volume, depth, small_intrinsics, pose)

    # march the voxel column in front of the image center toward the wall at z = 4
    grid = volume.grid
    (ix, iy, _), _ = grid.voxel_of(np.array([2.0, 1.25, 2.0]))
    column = volume.tsdf[ix, iy]
    weights = volume.weight[ix, iy]
    centers_z = grid.origin[2] + (np.arange(grid.dims[2]) + 0.5) * grid.voxel_size
    in_front = (centers_z > 1.5) & (centers_z < 4.0 - volume.mu)
    assert np.all(column[in_front & (weights > 0)] == 1.0)
    near = np.abs(centers_z - 4.0) < 0.5 * volume.mu
    assert np.all(np.sign(column[near]) == np.sign(4.0 - centers_z[near]))


def test_weight_is_capped(empty_room, small_intrinsics, floor_pose):
    volume = _room_volume(empty_room, weight_max=3.0)
    depth, _ = render_frame(empty_room, small_intrinsics, floor_pose)
    for _ in range(5):
        integrate(volume, depth, small_intrinsics, floor_pose)
    assert volume.weight.max() == 3.0
    assert volume.tsdf.min() >= -1.0 and volume.tsdf.max() <= 1.0


def test_integration_independent_of_worker_count(furnished_room, small_intrinsics, room_pose):
    depth, _ = render_frame(furnished_room, small_intrinsics, room_pose)
    single = integrate(_room_volume(furnished_room), depth, small_intrinsics, room_pose, workers=1)
    pooled = integrate(_room_volume(furnished_room), depth, small_intrinsics, room_pose, workers=4)
    np.testing.assert_array_equal(single.tsdf, pooled.tsdf)
    np.testing.assert_array_equal(single.weight, pooled.weight)


def test_raycast_of_empty_volume_is_invalid(empty_room, small_intrinsics, room_pose):
    surface = raycast(_room_volume(empty_room), small_intrinsics, room_pose)
    assert surface.num_valid == 0
    assert not surface.depth.any()


def test_raycast_floor_depth_and_normals(empty_room, small_intrinsics, floor_pose):
    volume = _room_volume(empty_room)
    depth, _ = render_frame(empty_room, small_intrinsics, floor_pose)
    integrate(volume, depth, small_intrinsics, floor_pose)
    surface = raycast(volume, small_intrinsics, floor_pose)
    assert surface.valid.mean() > 0.4
    np.testing.assert_allclose(surface.depth_mm[surface.valid], 1000.0, atol=1000.0 * volume.voxel_size)
    up = surface.normals[surface.valid] @ np.array([0.0, 1.0, 0.0])
    assert np.median(up) > 0.99
    np.testing.assert_allclose(surface.points[surface.valid][:, 1], 0.0, atol=volume.voxel_size)
    # voxels more than mu below the floor are never touched
    centers_y = volume.grid.origin[1] + (np.arange(volume.grid.dims[1]) + 0.5) * volume.voxel_size
    assert not volume.weight[:, centers_y < -1.1 * volume.mu, :].any()


def test_held_out_view_matches_rendered_depth(empty_room, small_intrinsics):
    poses = generate_trajectory(empty_room.bounds, 8)
    held_out = generate_trajectory(empty_room.bounds, 1, OrbitSpec(start_deg=22.5))[0]
    coverage, within = _round_trip_fraction(empty_room, small_intrinsics, poses, held_out, dim=48)
    assert coverage > 0.3
    assert within >= 0.9


@pytest.mark.slow
def test_held_out_view_at_full_resolution():
    scene = generate_room(RoomSpec(n_chairs=2, n_tables=1, seed=1))
    intrinsics = CameraIntrinsics()
    poses = generate_trajectory(scene.bounds, 30)
    held_out = generate_trajectory(scene.bounds, 1, OrbitSpec(start_deg=6.0))[0]
    _, within = _round_trip_fraction(scene, intrinsics, poses, held_out, dim=128)
    assert within >= 0.95


def _slab_volume(mu_voxels=4.0, origin=(-0.225, -0.225, 0.975), dims=(9, 9, 30)):
    """5 cm voxels; index 4 on x and y sits on the optical axis, z centers at 1.0 + 0.05 k"""
    return TsdfVolume(VoxelGrid(np.array(origin), 0.05, dims), mu=mu_voxels * 0.05)


def _axis_intrinsics():
    return CameraIntrinsics(fx=60.0, fy=60.0, cx=40.0, cy=30.0, width=81, height=61)


def test_truncated_distance_at_half_mu():
    volume = _slab_volume()
    intrinsics = _axis_intrinsics()
    integrate(volume, np.full(intrinsics.shape, 2000.0), intrinsics, Pose.identity())
    column = volume.tsdf[4, 4]
    assert volume.mu == pytest.approx(0.2)
    # centers at 1.9 and 2.1 are mu / 2 in front of and behind the wall at z = 2
    assert column[18] == pytest.approx(0.5, abs=1e-6)
    assert column[22] == pytest.approx(-0.5, abs=1e-6)
    assert column[10] == 1.0
    assert volume.weight[4, 4, 25] == 0.0


def test_repeated_frame_equals_doubled_weight():
    intrinsics = _axis_intrinsics()
    first = np.full(intrinsics.shape, 2000.0)
    second = np.full(intrinsics.shape, 2060.0)
    repeated, doubled = _slab_volume(), _slab_volume()
    integrate(repeated, first, intrinsics, Pose.identity())
    integrate(doubled, first, intrinsics, Pose.identity())
    for _ in range(2):
        integrate(repeated, second, intrinsics, Pose.identity(), frame_weight=1.5)
    integrate(doubled, second, intrinsics, Pose.identity(), frame_weight=3.0)
    np.testing.assert_array_equal(repeated.weight, doubled.weight)
    np.testing.assert_allclose(repeated.tsdf, doubled.tsdf, atol=1e-6)


def test_sphere_distance_along_the_optical_axis():
    intrinsics = _axis_intrinsics()
    center, radius = np.array([0.0, 0.0, 2.0]), 0.5
    dirs = intrinsics.ray_directions()
    # nearest root of |t * d - c| = r with d scaled to unit camera z
    b = dirs @ center
    a = np.einsum("...i,...i->...", dirs, dirs)
    disc = b * b - a * (center @ center - radius ** 2)
    depth = np.where(disc >= 0, (b - np.sqrt(np.maximum(disc, 0.0))) / a, 0.0) * 1000.0

    volume = _slab_volume()
    integrate(volume, depth, intrinsics, Pose.identity())
    z = 1.0 + 0.05 * np.arange(volume.grid.dims[2])
    sdf = np.abs(z - center[2]) - radius
    seen = volume.weight[4, 4] > 0
    assert seen.sum() > 10
    assert not seen[sdf < -volume.mu - 1e-9].any()
    np.testing.assert_allclose(volume.tsdf[4, 4][seen], np.clip(sdf[seen] / volume.mu, -1.0, 1.0), atol=1e-5)
