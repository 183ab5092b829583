"""
Pipeline orchestration: dataset generation, training, reconstruction runs and evaluation
"""

import hashlib
import json
import platform
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numba
import numpy as np
import PIL
import scipy

from app.core.config import settings
from app.core.errors import (
    ConfigError, DatasetError, DegenerateScatterError, InsufficientSamplesError, TrackingLostError,
)
from app.core.logging import get_logger
from app.models.camera import Pose
from app.models.images import FeatureImage, LabelImage, ProbabilityImage
from app.models.scene import ClassTaxonomy, Scene, default_taxonomy
from app.models.volume import GravityFrame, LabelVolume, TsdfVolume
from app.schemas.config import RunConfig
from app.schemas.metrics import RunMetrics, SegMetrics, TrainReport
from app.services import file_service
from app.services.feature_service import FeatureService, assemble_dhac
from app.services.label_fusion_service import (
    LabelFusionService, evaluate, extract_labels, fuse_frame, ground_truth_volume, palette_legend,
    write_label_png,
)
from app.services.render_service import RenderService, backproject_depth, generate_trajectory
from app.services.scene_service import (
    SCENE_OBJ, TAXONOMY_FILE, generate_room, load_scene, load_scene_dir, read_taxonomy, write_scene,
)
from app.services.segnet_service import (
    SegmentationService, encode_weights, layer_accuracy, load_weights, stack_forward, train_stack,
)
from app.services.tracking_service import (
    MIN_GRAVITY_SAMPLES, IcpTracker, align_gravity, surface_from_depth,
)
from app.services.tsdf_service import integrate, raycast

logger = get_logger(__name__)

PathLike = Union[str, Path]

MANIFEST = "manifest.json"
RUN_CONFIG = "run_config.txt"
METRICS = "metrics.json"
WEIGHTS = "weights.bin"
TRAIN_REPORT = "train_report.json"
TSDF_DUMP = "tsdf.bin"
LABEL_DUMP = "labels.bin"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def versions() -> Dict[str, str]:
    return {
        "semfusion": settings.VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "numba": numba.__version__,
        "scipy": scipy.__version__,
        "pillow": PIL.__version__,
    }


def write_manifest(out_dir: Path, command: str) -> Dict[str, object]:
    """File digests of an output directory; no timestamps so reruns match byte for byte"""
    files = []
    for path in sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST):
        files.append({
            "path": path.relative_to(out_dir).as_posix(),
            "bytes": path.stat().st_size,
            "sha256": _sha256(path),
        })
    manifest = {"command": command, "versions": versions(), "files": files}
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _sample_evenly(array: np.ndarray, count: int) -> np.ndarray:
    if len(array) <= count:
        return array
    return array[np.linspace(0, len(array) - 1, count).astype(np.int64)]


class PipelineService:
    """One configured pipeline; every command writes into its own output directory"""

    def __init__(self, config: Optional[RunConfig] = None):
        self.config = config or RunConfig()

    # shared helpers

    def _prepare_output(self, out_dir: PathLike) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / RUN_CONFIG).write_text(self.config.dump(), encoding="utf-8")
        return out

    def build_scene(self) -> Scene:
        config = self.config
        if config.scene_source == "procedural":
            return generate_room(config.room)
        if not config.obj_path or not config.annotation_path:
            raise ConfigError("scene_source = obj needs obj_path and annotation_path")
        return load_scene(config.obj_path, config.annotation_path, config.taxonomy_path,
                          config.condensation_path)

    def _frames(self, directory: PathLike) -> List[file_service.FrameRecord]:
        directory = Path(directory)
        indices = file_service.list_frames(directory)
        if not indices:
            raise DatasetError(f"no frames in {directory}")
        return [file_service.read_frame(directory, i) for i in indices]

    @staticmethod
    def _taxonomy_of(directory: Path) -> ClassTaxonomy:
        path = directory / TAXONOMY_FILE
        if path.exists():
            return read_taxonomy(path.read_text(encoding="utf-8"))
        return default_taxonomy()

    def _new_volume(self, bounds: Tuple[np.ndarray, np.ndarray]) -> TsdfVolume:
        volume = self.config.tsdf
        return TsdfVolume.for_bounds(bounds, dim=volume.grid_dim, margin=volume.margin,
                                     mu_voxels=volume.mu_voxels, weight_max=volume.weight_max)

    def _sequence_volume(self, sequence: Path,
                         frames: Sequence[file_service.FrameRecord]) -> Tuple[Optional[Scene], TsdfVolume]:
        """Scene stored with the sequence (if any) and an empty volume around it"""
        scene = load_scene_dir(sequence) if (sequence / SCENE_OBJ).exists() else None
        bounds = scene.bounds if scene is not None else self._frame_bounds(frames[0])
        return scene, self._new_volume(bounds)

    def feature_depths(self, sequence: Path, frames: Sequence[file_service.FrameRecord]) -> List[np.ndarray]:
        """Depth each frame's features are computed from, as the run loop sees it under true poses"""
        if self.config.feature_depth_source == "raw":
            return [frame.depth for frame in frames]
        _, tsdf = self._sequence_volume(sequence, frames)
        depths = []
        for frame in frames:
            integrate(tsdf, frame.depth, frame.intrinsics, frame.pose, self.config.tsdf.frame_weight)
            depths.append(raycast(tsdf, frame.intrinsics, frame.pose).depth_mm)
        return depths

    def _estimate_gravity(self, frames: Sequence[file_service.FrameRecord],
                          depths: Sequence[np.ndarray]) -> GravityFrame:
        per_frame = max(MIN_GRAVITY_SAMPLES, self.config.gravity_samples // len(frames))
        normals, points = [], []
        for frame, depth in zip(frames, depths):
            surface = surface_from_depth(depth, frame.intrinsics, frame.pose, self.config.discontinuity)
            normals.append(_sample_evenly(surface.normals[surface.valid], per_frame))
            points.append(_sample_evenly(surface.points[surface.valid], per_frame))
        try:
            return align_gravity(_sample_evenly(np.concatenate(normals), self.config.gravity_samples),
                                 np.concatenate(points))
        except (InsufficientSamplesError, DegenerateScatterError) as e:
            logger.warning("gravity.fallback_identity", reason=str(e))
            return GravityFrame.identity()

    # generate

    def generate(self, out_dir: PathLike) -> Dict[str, object]:
        """Scene files plus the rendered frame sequence"""
        out = self._prepare_output(out_dir)
        scene = self.build_scene()
        write_scene(scene, out)
        intrinsics = self.config.intrinsics
        trajectory = generate_trajectory(scene.bounds, self.config.n_frames, self.config.orbit)
        renderer = RenderService(scene, intrinsics)
        for index, depth, labels, pose in renderer.render_sequence(trajectory):
            file_service.write_frame(out, index, depth, labels, intrinsics, pose)
        write_manifest(out, "generate")
        logger.info("pipeline.generated", out=str(out), frames=len(trajectory), triangles=scene.num_triangles)
        return {"frames": len(trajectory), "triangles": scene.num_triangles, "out": str(out)}

    # train

    def load_training_set(self, dataset_dirs: Sequence[PathLike]) -> List[Tuple[FeatureImage, LabelImage]]:
        if not dataset_dirs:
            raise DatasetError("no dataset directories given")
        dataset = []
        for directory in dataset_dirs:
            frames = self._frames(directory)
            depths = self.feature_depths(Path(directory), frames)
            gravity = self._estimate_gravity(frames, depths)
            for frame, depth in zip(frames, depths):
                features = assemble_dhac(depth, frame.intrinsics, frame.pose, gravity, self.config.features)
                dataset.append((features, frame.labels))
            logger.info("pipeline.dataset_loaded", directory=str(directory), frames=len(frames),
                        feature_depth=self.config.feature_depth_source)
        return dataset

    def train(self, dataset_dirs: Sequence[PathLike], out_dir: PathLike, resume: Optional[PathLike] = None,
              start_layer: int = 0) -> TrainReport:
        """Layer-wise training; with resume, layers before start_layer come from the weight file"""
        dataset = self.load_training_set(dataset_dirs)
        out = self._prepare_output(out_dir)
        previous = None
        if resume is not None:
            previous = load_weights(resume)
            if previous.num_classes != self.config.num_classes or previous.hidden != self.config.hidden:
                raise ConfigError("resume weights do not match the configured network")
        elif start_layer:
            raise ConfigError("start_layer needs resume weights")

        stack, reports = train_stack(dataset, self.config.training, previous, start_layer)
        weights = encode_weights(stack)
        (out / WEIGHTS).write_bytes(weights)

        report = TrainReport(
            layers=reports,
            layer_accuracy=layer_accuracy(stack, dataset),
            num_images=len(dataset),
            num_classes=stack.num_classes,
            weights_sha256=hashlib.sha256(weights).hexdigest(),
        )
        (out / TRAIN_REPORT).write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")

        layers_dir = out / "layers"
        layers_dir.mkdir(exist_ok=True)
        features, labels = dataset[0]
        write_label_png(layers_dir / "ground_truth.png", labels, stack.num_classes)
        for i, probs in enumerate(stack_forward(stack, features), start=1):
            write_label_png(layers_dir / f"layer_{i}.png", probs.argmax(), stack.num_classes)
        write_manifest(out, "train")
        logger.info("pipeline.trained", layers=stack.trained_layers, accuracy=report.layer_accuracy)
        return report

    # run

    def run(self, sequence_dir: PathLike, weights_path: PathLike, out_dir: PathLike) -> RunMetrics:
        """Online loop per frame: track, integrate, raycast, features, predict, fuse"""
        config = self.config
        sequence = Path(sequence_dir)
        frames = self._frames(sequence)
        segmenter = SegmentationService.from_file(weights_path)
        scene, tsdf = self._sequence_volume(sequence, frames)
        if scene is not None and scene.taxonomy.num_classes != segmenter.num_classes:
            raise ConfigError(
                f"scene has {scene.taxonomy.num_classes} classes, network predicts {segmenter.num_classes}"
            )
        num_classes = segmenter.num_classes
        intrinsics = frames[0].intrinsics
        fusion = LabelFusionService(tsdf, num_classes)
        tracker = IcpTracker(intrinsics, max_iterations=config.icp_max_iterations,
                             discontinuity=config.discontinuity)
        extractor = FeatureService(intrinsics, config.features)

        out = self._prepare_output(out_dir)
        for sub in ("predictions", "views", "poses"):
            (out / sub).mkdir(exist_ok=True)

        poses: List[Pose] = []
        frame_accuracy: List[float] = []
        iterations: List[int] = []
        per_frame_samples = max(MIN_GRAVITY_SAMPLES, config.gravity_samples // len(frames))
        normals, points = [], []
        gravity = GravityFrame.identity()
        surface = None
        for frame in frames:
            if config.pose_source == "gt" or surface is None:
                pose = frame.pose
            else:
                try:
                    pose = tracker.track(surface, frame.depth, poses[-1], model_pose=poses[-1])
                    iterations.append(tracker.last_stats.iterations)
                except TrackingLostError:
                    logger.error("pipeline.tracking_lost", frame=frame.index)
                    self._finish_run(out, frames, poses, frame_accuracy, iterations, tsdf, fusion, scene,
                                     num_classes, completed=False)
                    raise
            poses.append(pose)
            file_service.write_pose(out / "poses" / f"frame_{frame.index:05d}.pose.txt", intrinsics, pose)

            integrate(tsdf, frame.depth, intrinsics, pose, config.tsdf.frame_weight)
            surface = raycast(tsdf, intrinsics, pose)
            normals.append(_sample_evenly(surface.normals[surface.valid], per_frame_samples))
            points.append(_sample_evenly(surface.points[surface.valid], per_frame_samples))
            try:
                gravity = align_gravity(_sample_evenly(np.concatenate(normals), config.gravity_samples),
                                        np.concatenate(points))
            except (InsufficientSamplesError, DegenerateScatterError) as e:
                logger.debug("pipeline.gravity_kept", frame=frame.index, reason=str(e))

            feature_depth = surface.depth_mm if config.feature_depth_source == "raycast" else frame.depth
            features = extractor.extract(feature_depth, pose, gravity)
            prob = segmenter.predict(features)
            fusion.fuse(prob, surface.depth_mm, intrinsics, pose)

            predicted = prob.argmax()
            file_service.write_labels(out / "predictions" / f"frame_{frame.index:05d}.label.pgm", predicted)
            frame_accuracy.append(evaluate(predicted, frame.labels, num_classes).accuracy)
            logger.info("pipeline.frame", frame=frame.index, accuracy=round(frame_accuracy[-1], 4),
                        surface=surface.num_valid)

        return self._finish_run(out, frames, poses, frame_accuracy, iterations, tsdf, fusion, scene,
                                num_classes, completed=True)

    def _frame_bounds(self, frame: file_service.FrameRecord) -> Tuple[np.ndarray, np.ndarray]:
        points, valid = backproject_depth(frame.depth, frame.intrinsics)
        if not valid.any():
            raise DatasetError(f"frame {frame.index} has no depth to bound the volume")
        world = frame.pose.to_world(points[valid])
        return world.min(axis=0), world.max(axis=0)

    def _ground_truth(self, frames, scene: Optional[Scene], tsdf: TsdfVolume, num_classes: int) -> np.ndarray:
        gt_poses = [frame.pose for frame in frames]
        if scene is not None:
            return extract_labels(ground_truth_volume(scene, gt_poses, frames[0].intrinsics, tsdf.grid))
        volume = LabelVolume(grid=tsdf.grid, num_classes=num_classes)
        for frame in frames:
            fuse_frame(volume, ProbabilityImage.from_labels(frame.labels, num_classes), frame.depth,
                       frame.intrinsics, frame.pose)
        return extract_labels(volume)

    def _finish_run(self, out: Path, frames, poses: List[Pose], frame_accuracy: List[float],
                    iterations: List[int], tsdf: TsdfVolume, fusion: LabelFusionService,
                    scene: Optional[Scene], num_classes: int, completed: bool) -> RunMetrics:
        file_service.save_tsdf(out / TSDF_DUMP, tsdf)
        file_service.save_label_volume(out / LABEL_DUMP, fusion.volume)

        done = frames[:len(poses)]
        views, truths = [], []
        for frame, pose in zip(done, poses):
            view = fusion.render_view(frame.intrinsics, pose)
            file_service.write_labels(out / "views" / f"frame_{frame.index:05d}.label.pgm", view)
            views.append(view.ravel())
            truths.append(frame.labels.ravel())
        if views:
            fused_view = evaluate(np.concatenate(views), np.concatenate(truths), num_classes).accuracy
        else:
            fused_view = 0.0

        gt_volume = self._ground_truth(frames, scene, tsdf, num_classes)
        fused_volume = evaluate(fusion.labels(), gt_volume, num_classes)

        all_truth = np.concatenate([frame.labels.ravel() for frame in frames])
        counts = np.bincount(all_truth[all_truth < num_classes], minlength=num_classes)
        majority = float(counts.max() / counts.sum()) if counts.sum() else 0.0

        tracking: Dict[str, float] = {}
        if poses:
            rot = [frame.pose.rotation_angle_to(pose) for frame, pose in zip(done, poses)]
            trans = [frame.pose.translation_distance_to(pose) for frame, pose in zip(done, poses)]
            tracking = {
                "max_rotation_error_deg": float(np.degrees(max(rot))),
                "max_translation_error_m": float(max(trans)),
                "mean_icp_iterations": float(np.mean(iterations)) if iterations else 0.0,
                "skipped_fusion_pixels": float(fusion.skipped_pixels),
            }

        metrics = RunMetrics(
            frames=len(poses),
            pose_source=self.config.pose_source,
            per_frame_accuracy=frame_accuracy,
            mean_frame_accuracy=float(np.mean(frame_accuracy)) if frame_accuracy else 0.0,
            fused_view_accuracy=fused_view,
            fused_volume=fused_volume,
            majority_baseline=majority,
            tracking=tracking,
            completed=completed,
        )
        (out / METRICS).write_text(metrics.model_dump_json(indent=2) + "\n", encoding="utf-8")
        write_manifest(out, "run")
        logger.info("pipeline.run_finished", frames=len(poses), completed=completed,
                    fused_accuracy=round(fused_volume.accuracy, 4))
        return metrics

    # eval

    def evaluate(self, predicted: PathLike, ground_truth: PathLike, out_dir: PathLike) -> SegMetrics:
        """Compare label views (frame directories) or label-volume dumps; write metrics and PNGs"""
        predicted, ground_truth = Path(predicted), Path(ground_truth)
        out = self._prepare_output(out_dir)
        if predicted.is_file() and ground_truth.is_file():
            pred_volume = file_service.load_label_volume(predicted)
            gt_volume = file_service.load_label_volume(ground_truth)
            metrics = evaluate(extract_labels(pred_volume), extract_labels(gt_volume), gt_volume.num_classes)
        else:
            metrics = self._evaluate_views(predicted, ground_truth, out)
        (out / METRICS).write_text(metrics.model_dump_json(indent=2) + "\n", encoding="utf-8")
        write_manifest(out, "eval")
        logger.info("pipeline.evaluated", accuracy=round(metrics.accuracy, 4), total=metrics.total)
        return metrics

    def _evaluate_views(self, predicted: Path, ground_truth: Path, out: Path) -> SegMetrics:
        indices = file_service.list_frames(ground_truth)
        if not indices:
            raise DatasetError(f"no ground-truth frames in {ground_truth}")
        if (predicted / "views").is_dir():
            predicted = predicted / "views"
        taxonomy = self._taxonomy_of(ground_truth)
        png_dir = out / "png"
        png_dir.mkdir(exist_ok=True)
        preds, truths = [], []
        for index in indices:
            name = f"frame_{index:05d}.label.pgm"
            if not (predicted / name).exists():
                raise DatasetError(f"missing prediction {predicted / name}")
            pred = file_service.read_labels(predicted / name)
            truth = file_service.read_labels(ground_truth / name)
            if pred.shape != truth.shape:
                raise DatasetError(f"{name}: prediction and ground truth differ in size")
            write_label_png(png_dir / f"frame_{index:05d}.pred.png", pred, taxonomy.num_classes)
            write_label_png(png_dir / f"frame_{index:05d}.gt.png", truth, taxonomy.num_classes)
            preds.append(pred.ravel())
            truths.append(truth.ravel())
        (out / "palette.json").write_text(json.dumps(palette_legend(taxonomy.names), indent=2) + "\n",
                                          encoding="utf-8")
        return evaluate(np.concatenate(preds), np.concatenate(truths), taxonomy.num_classes)
