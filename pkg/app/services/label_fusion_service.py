"""
Bayesian label fusion into a voxel volume, label reprojection and evaluation
"""

import colorsys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from app.core.errors import GridMismatchError
from app.core.logging import get_logger
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import LabelImage, ProbabilityImage
from app.models.scene import VOID_ID, Scene
from app.models.volume import LOG_FIXED_SCALE, LabelVolume, TsdfVolume, VoxelGrid
from app.schemas.metrics import FusionExperiment, SegMetrics
from app.services.render_service import backproject_depth, render_frame_metric
from app.services.tsdf_service import raycast

logger = get_logger(__name__)

PROB_FLOOR = 1e-6

# chair, table, floor, ceiling, wall
DEFAULT_PALETTE = (
    (220, 20, 60),
    (255, 165, 0),
    (34, 139, 34),
    (135, 206, 235),
    (169, 169, 169),
)
VOID_COLOR = (0, 0, 0)


@dataclass
class FuseStats:
    fused: int = 0
    skipped: int = 0


def fuse_frame(volume: LabelVolume, prob: ProbabilityImage, depth: np.ndarray,
               intrinsics: CameraIntrinsics, pose: Pose) -> FuseStats:
    """Add log class probabilities of every measured pixel to the voxel under its surface point.

    depth is raycast depth in millimeters. Points outside the grid are counted
    and skipped.
    """
    if prob.num_classes != volume.num_classes:
        raise ValueError(f"{prob.num_classes}-class image for a {volume.num_classes}-class volume")
    if prob.mask.shape != np.shape(depth):
        raise ValueError("probability image and depth differ in resolution")
    points, valid = backproject_depth(depth, intrinsics)
    valid &= prob.mask
    world = pose.to_world(points[valid])
    idx, inside = volume.grid.voxel_of(world)
    stats = FuseStats(fused=int(inside.sum()), skipped=int((~inside).sum()))
    if not stats.fused:
        return stats

    flat = volume.grid.flat_index(idx[inside])
    probs = prob.probs[:, valid][:, inside].T.astype(np.float64)
    logs = np.log(np.maximum(probs, PROB_FLOOR))
    fixed = np.rint(logs * LOG_FIXED_SCALE).astype(np.int64)
    np.add.at(volume.accumulators.reshape(-1, volume.num_classes), flat, fixed)
    np.add.at(volume.counts.reshape(-1), flat, 1)
    if stats.skipped:
        logger.debug("fusion.out_of_bounds", skipped=stats.skipped)
    return stats


def extract_labels(volume: LabelVolume) -> np.ndarray:
    """Argmax per voxel (ties to the lowest class id); unobserved voxels void"""
    return volume.labels()


def posterior(volume: LabelVolume, voxel: Tuple[int, int, int]) -> np.ndarray:
    return volume.posterior(tuple(voxel))


def lookup_labels(labels: np.ndarray, grid: VoxelGrid, world_points: np.ndarray,
                  valid: np.ndarray) -> LabelImage:
    """Label of the voxel containing each valid point, void elsewhere"""
    out = np.full(valid.shape, VOID_ID, dtype=np.uint8)
    idx, inside = grid.voxel_of(world_points[valid])
    values = np.full(len(idx), VOID_ID, dtype=np.uint8)
    values[inside] = labels[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
    out[valid] = values
    return out


def render_label_view(volume: LabelVolume, tsdf: TsdfVolume, intrinsics: CameraIntrinsics,
                      pose: Pose) -> LabelImage:
    """Fused labels of the surface visible from pose"""
    if not volume.grid.same_geometry(tsdf.grid):
        raise GridMismatchError("label and TSDF volumes must share grid geometry")
    surface = raycast(tsdf, intrinsics, pose)
    return lookup_labels(extract_labels(volume), volume.grid, surface.points, surface.valid)


def ground_truth_volume(scene: Scene, trajectory: Sequence[Pose], intrinsics: CameraIntrinsics,
                        grid: VoxelGrid) -> LabelVolume:
    """Fuse one-hot ground-truth renders along the trajectory"""
    volume = LabelVolume(grid=grid, num_classes=scene.taxonomy.num_classes)
    for pose in trajectory:
        depth_m, labels = render_frame_metric(scene, intrinsics, pose)
        prob = ProbabilityImage.from_labels(labels, volume.num_classes, confidence=1.0)
        fuse_frame(volume, prob, depth_m * 1000.0, intrinsics, pose)
    return volume


def disagreeing_voxels(volume: LabelVolume) -> np.ndarray:
    """Observed voxels of a one-hot fused volume that received more than one class"""
    unanimous = (volume.accumulators == 0).any(axis=-1)
    return volume.observed & ~unanimous


def evaluate(predicted: np.ndarray, ground_truth: np.ndarray, num_classes: int) -> SegMetrics:
    """Confusion-matrix metrics; void ground truth is ignored, void predictions reduce coverage"""
    predicted = np.asarray(predicted).ravel()
    ground_truth = np.asarray(ground_truth).ravel()
    if predicted.shape != ground_truth.shape:
        raise ValueError("prediction and ground truth differ in size")
    labelled = ground_truth < num_classes
    scored = labelled & (predicted < num_classes)
    gt = ground_truth[scored].astype(np.int64)
    pred = predicted[scored].astype(np.int64)
    confusion = np.bincount(gt * num_classes + pred, minlength=num_classes * num_classes)
    confusion = confusion.reshape(num_classes, num_classes)
    support = confusion.sum(axis=1)
    total = int(support.sum())
    per_class = [float(confusion[c, c] / support[c]) if support[c] else None for c in range(num_classes)]
    present = [a for a in per_class if a is not None]
    labelled_count = int(labelled.sum())
    return SegMetrics(
        accuracy=float(np.trace(confusion) / total) if total else 0.0,
        per_class_accuracy=per_class,
        class_average_accuracy=float(np.mean(present)) if present else 0.0,
        confusion=confusion.tolist(),
        support=support.tolist(),
        total=total,
        coverage=total / labelled_count if labelled_count else 0.0,
    )


def corrupt_labels(labels: LabelImage, num_classes: int, fraction: float,
                   rng: np.random.Generator) -> LabelImage:
    """Replace a random fraction of labelled pixels by uniformly drawn classes"""
    out = labels.copy()
    labelled = labels != VOID_ID
    flip = labelled & (rng.random(labels.shape) < fraction)
    out[flip] = rng.integers(0, num_classes, size=int(flip.sum()))
    return out


def fusion_benefit_experiment(scene: Scene, trajectory: Sequence[Pose], intrinsics: CameraIntrinsics,
                              grid: VoxelGrid, corruption: float = 0.25, confidence: float = 0.9,
                              seeds: Iterable[int] = range(5)) -> FusionExperiment:
    """Fused voxel accuracy against mean single-frame accuracy under random label corruption"""
    num_classes = scene.taxonomy.num_classes
    frames = [render_frame_metric(scene, intrinsics, pose) for pose in trajectory]
    truth_volume = LabelVolume(grid=grid, num_classes=num_classes)
    for (depth_m, labels), pose in zip(frames, trajectory):
        fuse_frame(truth_volume, ProbabilityImage.from_labels(labels, num_classes), depth_m * 1000.0,
                   intrinsics, pose)
    truth = extract_labels(truth_volume)

    seeds = list(seeds)
    fused_accuracy, frame_accuracy = [], []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        volume = LabelVolume(grid=grid, num_classes=num_classes)
        per_frame = []
        for (depth_m, labels), pose in zip(frames, trajectory):
            noisy = corrupt_labels(labels, num_classes, corruption, rng)
            prob = ProbabilityImage.from_labels(noisy, num_classes, confidence)
            fuse_frame(volume, prob, depth_m * 1000.0, intrinsics, pose)
            points, valid = backproject_depth(depth_m * 1000.0, intrinsics)
            projected = lookup_labels(truth, grid, pose.to_world(points), valid)
            per_frame.append(evaluate(noisy, projected, num_classes).accuracy)
        fused_accuracy.append(evaluate(extract_labels(volume), truth, num_classes).accuracy)
        frame_accuracy.append(float(np.mean(per_frame)))
        logger.info("fusion.experiment_seed", seed=seed, fused=round(fused_accuracy[-1], 4),
                    per_frame=round(frame_accuracy[-1], 4))
    gain = float(np.mean(np.array(fused_accuracy) - np.array(frame_accuracy)))
    return FusionExperiment(seeds=seeds, fused_accuracy=fused_accuracy, per_frame_accuracy=frame_accuracy,
                            mean_gain=gain)


# Visualization

def palette(num_classes: int) -> np.ndarray:
    """(256, 3) uint8 color table: fixed colors for the first five ids, void black"""
    table = np.zeros((256, 3), dtype=np.uint8)
    table[:len(DEFAULT_PALETTE)] = DEFAULT_PALETTE
    for cid in range(len(DEFAULT_PALETTE), num_classes):
        # golden-angle hues keep extra classes distinct and stable
        hue = (cid * 0.618033988749895) % 1.0
        table[cid] = np.rint(np.array(colorsys.hsv_to_rgb(hue, 0.65, 0.9)) * 255)
    table[VOID_ID] = VOID_COLOR
    return table


def colorize(labels: LabelImage, num_classes: int = len(DEFAULT_PALETTE)) -> np.ndarray:
    """RGB (H, W, 3) rendering of a label image"""
    return palette(num_classes)[np.asarray(labels, dtype=np.uint8)]


def write_label_png(path: Union[str, Path], labels: LabelImage, num_classes: int = len(DEFAULT_PALETTE)) -> None:
    """Palette PNG whose pixel indices are the class ids"""
    image = Image.fromarray(np.asarray(labels, dtype=np.uint8))
    # a palette turns the grayscale raster into an indexed one
    image.putpalette(palette(num_classes).ravel().tolist())
    image.save(path, format="PNG")


def palette_legend(names: List[str]) -> Dict[str, List[int]]:
    table = palette(len(names))
    legend = {name: table[cid].tolist() for cid, name in enumerate(names)}
    legend["void"] = list(VOID_COLOR)
    return legend


class LabelFusionService:
    """Label volume paired with the TSDF it annotates"""

    def __init__(self, tsdf: TsdfVolume, num_classes: int):
        self.tsdf = tsdf
        self.volume = LabelVolume(grid=tsdf.grid, num_classes=num_classes)
        self.fused_pixels = 0
        self.skipped_pixels = 0

    def fuse(self, prob: ProbabilityImage, depth: np.ndarray, intrinsics: CameraIntrinsics,
             pose: Pose) -> FuseStats:
        stats = fuse_frame(self.volume, prob, depth, intrinsics, pose)
        self.fused_pixels += stats.fused
        self.skipped_pixels += stats.skipped
        return stats

    def labels(self) -> np.ndarray:
        return extract_labels(self.volume)

    def render_view(self, intrinsics: CameraIntrinsics, pose: Pose) -> LabelImage:
        return render_label_view(self.volume, self.tsdf, intrinsics, pose)
