import numpy as np
import pytest
from PIL import Image

from app.core.errors import GridMismatchError
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import ProbabilityImage
from app.models.scene import VOID_ID
from app.models.volume import LabelVolume, TsdfVolume, VoxelGrid
from app.schemas.config import RoomSpec
from app.services.label_fusion_service import (
    VOID_COLOR, LabelFusionService, colorize, disagreeing_voxels, evaluate, extract_labels, fuse_frame,
    fusion_benefit_experiment, ground_truth_volume, palette, palette_legend, posterior, render_label_view,
    write_label_png,
)
from app.services.render_service import generate_trajectory, render_frame
from app.services.scene_service import generate_room
from app.services.tsdf_service import integrate


def _plane_grid(dim=8):
    return VoxelGrid.for_bounds((np.array([-1.0, -1.0, 0.5]), np.array([1.0, 1.0, 1.5])), dim=dim, margin=0.0)


def _random_probs(rng, shape, num_classes=5):
    probs = rng.uniform(0.01, 1.0, size=(num_classes,) + shape)
    probs /= probs.sum(axis=0)
    return ProbabilityImage(probs, rng.uniform(size=shape) > 0.1)


def test_fusion_is_order_invariant(furnished_room, small_intrinsics):
    rng = np.random.default_rng(4)
    grid = VoxelGrid.for_bounds(furnished_room.bounds, dim=24, margin=0.2)
    frames = []
    for pose in generate_trajectory(furnished_room.bounds, 3):
        depth, _ = render_frame(furnished_room, small_intrinsics, pose)
        frames.append((_random_probs(rng, small_intrinsics.shape), depth, pose))

    forward, backward = LabelVolume(grid, 5), LabelVolume(grid, 5)
    for prob, depth, pose in frames:
        fuse_frame(forward, prob, depth, small_intrinsics, pose)
    for prob, depth, pose in reversed(frames):
        fuse_frame(backward, prob, depth, small_intrinsics, pose)
    assert forward.observed.any()
    np.testing.assert_array_equal(forward.accumulators, backward.accumulators)
    np.testing.assert_array_equal(forward.counts, backward.counts)
    np.testing.assert_array_equal(extract_labels(forward), extract_labels(backward))


def test_ties_go_to_the_lowest_class(small_intrinsics):
    volume = LabelVolume(_plane_grid(), 5)
    depth = np.full(small_intrinsics.shape, 1000, dtype=np.uint16)
    probs = np.broadcast_to(np.array([0.1, 0.3, 0.3, 0.2, 0.1])[:, None, None], (5,) + small_intrinsics.shape)
    stats = fuse_frame(volume, ProbabilityImage(probs, np.ones(small_intrinsics.shape, dtype=bool)), depth,
                       small_intrinsics, Pose.identity())
    assert stats.fused == small_intrinsics.width * small_intrinsics.height and stats.skipped == 0

    labels = extract_labels(volume)
    assert np.all(labels[volume.observed] == 1)
    assert np.all(labels[~volume.observed] == VOID_ID)
    # every observation lands in the z = 1 m slab
    assert np.array_equal(np.unique(np.nonzero(volume.observed)[2]), [4])
    voxel = tuple(np.argwhere(volume.observed)[0])
    dist = posterior(volume, voxel)
    assert dist.sum() == pytest.approx(1.0)
    assert dist[1] == pytest.approx(dist[2]) and dist[1] > dist[3]


def test_points_outside_the_grid_are_skipped(small_intrinsics):
    volume = LabelVolume(_plane_grid(), 5)
    depth = np.full(small_intrinsics.shape, 3000, dtype=np.uint16)
    prob = ProbabilityImage.from_labels(np.full(small_intrinsics.shape, 2, dtype=np.uint8), 5)
    stats = fuse_frame(volume, prob, depth, small_intrinsics, Pose.identity())
    assert stats.fused == 0 and stats.skipped == small_intrinsics.width * small_intrinsics.height
    assert not volume.observed.any()


def test_evaluate_confusion_and_coverage():
    predicted = np.array([0, 1, 1, VOID_ID, 2])
    truth = np.array([0, 1, 2, 2, VOID_ID])
    metrics = evaluate(predicted, truth, 3)
    assert metrics.total == 3
    assert metrics.accuracy == pytest.approx(2 / 3)
    assert metrics.per_class_accuracy == [1.0, 1.0, 0.0]
    assert metrics.class_average_accuracy == pytest.approx(2 / 3)
    assert metrics.confusion == [[1, 0, 0], [0, 1, 0], [0, 1, 0]]
    assert metrics.coverage == pytest.approx(0.75)
    absent = evaluate(np.array([0, 0]), np.array([0, 0]), 3)
    assert absent.per_class_accuracy == [1.0, None, None]
    assert absent.class_average_accuracy == 1.0


def test_floor_only_ground_truth_is_unanimous(empty_room, small_intrinsics, floor_pose):
    grid = VoxelGrid.for_bounds(empty_room.bounds, dim=32, margin=0.2)
    volume = ground_truth_volume(empty_room, [floor_pose], small_intrinsics, grid)
    assert volume.observed.any()
    assert not disagreeing_voxels(volume).any()
    assert np.all(extract_labels(volume)[volume.observed] == 2)


def test_ground_truth_disagrees_only_at_junctions(empty_room, small_intrinsics):
    grid = VoxelGrid.for_bounds(empty_room.bounds, dim=32, margin=0.2)
    volume = ground_truth_volume(empty_room, generate_trajectory(empty_room.bounds, 6), small_intrinsics, grid)
    lo, hi = empty_room.bounds
    centers = grid.origin + (np.argwhere(disagreeing_voxels(volume)) + 0.5) * grid.voxel_size
    distances = np.sort(np.abs(np.concatenate([centers - lo, hi - centers], axis=1)), axis=1)
    # a mixed voxel holds surface points of two room planes
    assert np.all(distances[:, 1] <= grid.voxel_size)


def test_rendered_label_view_matches_ground_truth(furnished_room, small_intrinsics):
    poses = generate_trajectory(furnished_room.bounds, 6)
    tsdf = TsdfVolume.for_bounds(furnished_room.bounds, dim=48, margin=0.2)
    service = LabelFusionService(tsdf, 5)
    for pose in poses:
        depth, labels = render_frame(furnished_room, small_intrinsics, pose)
        integrate(tsdf, depth, small_intrinsics, pose)
        service.fuse(ProbabilityImage.from_labels(labels, 5, confidence=0.9), depth, small_intrinsics, pose)
    assert service.fused_pixels > 0

    view = service.render_view(small_intrinsics, poses[2])
    _, truth = render_frame(furnished_room, small_intrinsics, poses[2])
    metrics = evaluate(view, truth, 5)
    assert metrics.coverage > 0.3
    assert metrics.accuracy > 0.8

    other = TsdfVolume.for_bounds(furnished_room.bounds, dim=32, margin=0.2)
    with pytest.raises(GridMismatchError):
        render_label_view(service.volume, other, small_intrinsics, poses[0])


def test_fused_labels_beat_single_views(furnished_room, small_intrinsics):
    grid = VoxelGrid.for_bounds(furnished_room.bounds, dim=32, margin=0.2)
    result = fusion_benefit_experiment(furnished_room, generate_trajectory(furnished_room.bounds, 6),
                                       small_intrinsics, grid, seeds=range(2))
    assert result.seeds == [0, 1]
    for fused, single in zip(result.fused_accuracy, result.per_frame_accuracy):
        assert fused > single
    assert result.mean_gain >= 0.05


@pytest.mark.slow
def test_fusion_gain_at_full_resolution():
    scene = generate_room(RoomSpec(n_chairs=2, n_tables=1, seed=0))
    grid = VoxelGrid.for_bounds(scene.bounds, dim=128, margin=0.5)
    result = fusion_benefit_experiment(scene, generate_trajectory(scene.bounds, 30), CameraIntrinsics(), grid)
    assert all(f > s for f, s in zip(result.fused_accuracy, result.per_frame_accuracy))
    assert result.mean_gain >= 0.05


def test_palette_colors():
    table = palette(7)
    assert table.shape == (256, 3)
    assert table[2].tolist() == [34, 139, 34]
    assert table[VOID_ID].tolist() == [0, 0, 0]
    assert len({tuple(row) for row in table[:7]}) == 7
    legend = palette_legend(["chair", "table", "floor", "ceiling", "wall"])
    assert legend["wall"] == [169, 169, 169] and legend["void"] == [0, 0, 0]
    rgb = colorize(np.array([[0, VOID_ID]], dtype=np.uint8))
    assert rgb[0, 0].tolist() == [220, 20, 60] and rgb[0, 1].tolist() == [0, 0, 0]


def test_label_png_keeps_class_ids(tmp_path):
    labels = np.array([[0, 1, 2], [3, 4, VOID_ID]], dtype=np.uint8)
    write_label_png(tmp_path / "labels.png", labels)
    with Image.open(tmp_path / "labels.png") as image:
        assert image.mode == "P"
        np.testing.assert_array_equal(np.array(image), labels)
        assert image.getpalette()[6:9] == [34, 139, 34]



def _single_pixel_volume(observations):
    intrinsics = CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=1)
    volume = LabelVolume(_plane_grid(), 2)
    depth = np.full((1, 1), 1000, dtype=np.uint16)
    for probs in observations:
        prob = ProbabilityImage(np.array(probs, dtype=np.float64).reshape(2, 1, 1), np.ones((1, 1), dtype=bool))
        fuse_frame(volume, prob, depth, intrinsics, Pose.identity())
    return volume, tuple(np.argwhere(volume.observed)[0])


def test_posterior_of_one_observation_is_that_observation():
    volume, voxel = _single_pixel_volume([(0.6, 0.4)])
    np.testing.assert_allclose(posterior(volume, voxel), [0.6, 0.4], atol=1e-8)


def test_posterior_multiplies_repeated_observations():
    volume, voxel = _single_pixel_volume([(0.6, 0.4), (0.6, 0.4)])
    assert volume.counts[voxel] == 2
    # 0.36 : 0.16 after normalization
    np.testing.assert_allclose(posterior(volume, voxel), [0.36 / 0.52, 0.16 / 0.52], atol=1e-8)
    np.testing.assert_allclose(posterior(volume, voxel), [0.6923, 0.3077], atol=1e-4)


def test_generated_colors_are_distinct():
    table = palette(15)
    colors = {tuple(row) for row in table[:15]}
    assert len(colors) == 15
    assert tuple(VOID_COLOR) not in colors
    assert all(0 <= value <= 255 for row in table[5:15] for value in row)
