"""
On-disk formats: PGM rasters, pose files, frame sequences and binary volume dumps
"""

import io
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from app.core.errors import FormatError, TruncatedPayloadError
from app.models.camera import CameraIntrinsics, Pose
from app.models.images import DepthImage, FeatureImage, LabelImage
from app.models.volume import LabelVolume, TsdfVolume, VoxelGrid

PathLike = Union[str, Path]

FRAME_PATTERN = "frame_{:05d}"
FRAME_RE = re.compile(r"^frame_(\d{5})\.depth\.pgm$")

TSDF_MAGIC = b"SFTSDF\x00\x00"
LABEL_MAGIC = b"SFLABEL\x00"
FEATURE_MAGIC = b"SFFEAT\x00\x00"
DUMP_VERSION = 1

# magic, version, origin xyz, voxel size, dims, mu, weight cap
_TSDF_HEADER = struct.Struct("<8sI4d3I2d")
# magic, version, origin xyz, voxel size, dims, classes
_LABEL_HEADER = struct.Struct("<8sI4d3II")
# magic, version, channels, height, width
_FEATURE_HEADER = struct.Struct("<8sI3I")


# PGM

def encode_pgm(image: np.ndarray) -> bytes:
    """Binary P5 PGM: uint8 with maxval 255, uint16 big-endian with maxval 65535"""
    if image.ndim != 2:
        raise FormatError("PGM rasters are two-dimensional")
    if image.dtype == np.uint8:
        raster = Image.fromarray(image)
    elif image.dtype == np.uint16:
        # 32-bit grayscale is written as 16-bit big-endian samples
        raster = Image.fromarray(image.astype(np.int32))
    else:
        raise FormatError(f"unsupported PGM dtype {image.dtype}")
    buffer = io.BytesIO()
    raster.save(buffer, format="PPM")
    return buffer.getvalue()


def decode_pgm(data: bytes) -> np.ndarray:
    """Grayscale PGM to uint8 (maxval 255) or uint16 (wider maxval)"""
    try:
        raster = Image.open(io.BytesIO(data), formats=["PPM"])
    except (UnidentifiedImageError, SyntaxError, ValueError) as e:
        raise FormatError(f"not a PGM raster: {e}") from e
    if raster.mode not in ("L", "I"):
        raise FormatError(f"PGM must be grayscale, got mode {raster.mode}")
    try:
        raster.load()
    except OSError as e:
        raise TruncatedPayloadError(f"PGM payload truncated: {e}") from e
    pixels = np.asarray(raster)
    return pixels.astype(np.uint16) if raster.mode == "I" else pixels.astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path: PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_depth(path: PathLike, depth: DepthImage) -> None:
    write_pgm(path, np.asarray(depth, dtype=np.uint16))


def read_depth(path: PathLike) -> DepthImage:
    image = read_pgm(path)
    if image.dtype != np.uint16:
        raise FormatError(f"{path}: depth PGM must have maxval 65535")
    return image


def write_labels(path: PathLike, labels: LabelImage) -> None:
    write_pgm(path, np.asarray(labels, dtype=np.uint8))


def read_labels(path: PathLike) -> LabelImage:
    image = read_pgm(path)
    if image.dtype != np.uint8:
        raise FormatError(f"{path}: label PGM must have maxval 255")
    return image


# Pose files

def _fmt(value: float) -> str:
    return f"{float(value) + 0.0:.17g}"


def format_pose(intrinsics: CameraIntrinsics, pose: Pose) -> str:
    """Intrinsics header line, then the camera-to-world 3x4 matrix row-major"""
    header = " ".join([_fmt(intrinsics.fx), _fmt(intrinsics.fy), _fmt(intrinsics.cx),
                       _fmt(intrinsics.cy), str(intrinsics.width), str(intrinsics.height)])
    rows = [" ".join(_fmt(v) for v in row) for row in pose.matrix34()]
    return "\n".join([header] + rows) + "\n"


def parse_pose(text: str) -> Tuple[CameraIntrinsics, Pose]:
    lines = [line for line in text.splitlines() if line.strip()]
    if len(lines) != 4:
        raise FormatError(f"pose file needs 4 lines, got {len(lines)}")
    head = lines[0].split()
    if len(head) != 6:
        raise FormatError("pose header must be 'fx fy cx cy width height'")
    try:
        intrinsics = CameraIntrinsics(fx=float(head[0]), fy=float(head[1]), cx=float(head[2]),
                                      cy=float(head[3]), width=int(head[4]), height=int(head[5]))
        matrix = np.array([[float(v) for v in line.split()] for line in lines[1:]])
    except ValueError as e:
        raise FormatError(f"malformed pose file: {e}") from e
    if matrix.shape != (3, 4):
        raise FormatError("pose matrix must be 3 rows of 4 numbers")
    try:
        return intrinsics, Pose.from_matrix(matrix)
    except ValueError as e:
        raise FormatError(f"invalid pose: {e}") from e


def write_pose(path: PathLike, intrinsics: CameraIntrinsics, pose: Pose) -> None:
    Path(path).write_text(format_pose(intrinsics, pose), encoding="ascii")


def read_pose(path: PathLike) -> Tuple[CameraIntrinsics, Pose]:
    return parse_pose(Path(path).read_text(encoding="ascii"))


# Frame sequences

@dataclass(eq=False)
class FrameRecord:
    """One rendered view as stored on disk"""

    index: int
    depth: DepthImage
    labels: LabelImage
    intrinsics: CameraIntrinsics
    pose: Pose


def frame_paths(directory: PathLike, index: int) -> Tuple[Path, Path, Path]:
    stem = Path(directory) / FRAME_PATTERN.format(index)
    return (stem.with_name(stem.name + ".depth.pgm"),
            stem.with_name(stem.name + ".label.pgm"),
            stem.with_name(stem.name + ".pose.txt"))


def write_frame(directory: PathLike, index: int, depth: DepthImage, labels: LabelImage,
                intrinsics: CameraIntrinsics, pose: Pose) -> None:
    depth_path, label_path, pose_path = frame_paths(directory, index)
    write_depth(depth_path, depth)
    write_labels(label_path, labels)
    write_pose(pose_path, intrinsics, pose)


def read_frame(directory: PathLike, index: int) -> FrameRecord:
    depth_path, label_path, pose_path = frame_paths(directory, index)
    intrinsics, pose = read_pose(pose_path)
    return FrameRecord(index, read_depth(depth_path), read_labels(label_path), intrinsics, pose)


def list_frames(directory: PathLike) -> List[int]:
    """Sorted frame indices present in a sequence directory"""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    indices = []
    for path in directory.iterdir():
        match = FRAME_RE.match(path.name)
        if match:
            indices.append(int(match.group(1)))
    return sorted(indices)


# Binary dumps

def _read_header(data: bytes, header: struct.Struct, magic: bytes, what: str) -> tuple:
    if len(data) < header.size:
        raise TruncatedPayloadError(f"{what} dump shorter than its header")
    fields = header.unpack_from(data)
    if fields[0] != magic:
        raise FormatError(f"not a {what} dump (bad magic)")
    if fields[1] != DUMP_VERSION:
        raise FormatError(f"{what} dump version {fields[1]} unsupported")
    return fields


def _take(data: bytes, offset: int, count: int, dtype: str, what: str) -> Tuple[np.ndarray, int]:
    size = count * np.dtype(dtype).itemsize
    if len(data) < offset + size:
        raise TruncatedPayloadError(f"{what} dump payload truncated")
    array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return array, offset + size


def encode_tsdf(volume: TsdfVolume) -> bytes:
    grid = volume.grid
    header = _TSDF_HEADER.pack(TSDF_MAGIC, DUMP_VERSION, *grid.origin, grid.voxel_size,
                               *grid.dims, volume.mu, volume.weight_max)
    return (header + np.ascontiguousarray(volume.tsdf, dtype="<f4").tobytes()
            + np.ascontiguousarray(volume.weight, dtype="<f4").tobytes())


def decode_tsdf(data: bytes) -> TsdfVolume:
    fields = _read_header(data, _TSDF_HEADER, TSDF_MAGIC, "TSDF")
    origin, voxel_size, dims = fields[2:5], fields[5], tuple(fields[6:9])
    mu, weight_max = fields[9], fields[10]
    n = int(np.prod(dims))
    tsdf, offset = _take(data, _TSDF_HEADER.size, n, "<f4", "TSDF")
    weight, _ = _take(data, offset, n, "<f4", "TSDF")
    grid = VoxelGrid(np.array(origin), voxel_size, dims)
    return TsdfVolume(grid=grid, mu=mu, weight_max=weight_max,
                      tsdf=tsdf.astype(np.float32).reshape(dims),
                      weight=weight.astype(np.float32).reshape(dims))


def encode_label_volume(volume: LabelVolume) -> bytes:
    """Header, then K planar int64 accumulator planes and the int32 count plane"""
    grid = volume.grid
    header = _LABEL_HEADER.pack(LABEL_MAGIC, DUMP_VERSION, *grid.origin, grid.voxel_size,
                                *grid.dims, volume.num_classes)
    planes = np.moveaxis(volume.accumulators, -1, 0)
    return (header + np.ascontiguousarray(planes, dtype="<i8").tobytes()
            + np.ascontiguousarray(volume.counts, dtype="<i4").tobytes())


def decode_label_volume(data: bytes) -> LabelVolume:
    fields = _read_header(data, _LABEL_HEADER, LABEL_MAGIC, "label volume")
    origin, voxel_size, dims, num_classes = fields[2:5], fields[5], tuple(fields[6:9]), fields[9]
    n = int(np.prod(dims))
    planes, offset = _take(data, _LABEL_HEADER.size, n * num_classes, "<i8", "label volume")
    counts, _ = _take(data, offset, n, "<i4", "label volume")
    accumulators = np.moveaxis(planes.astype(np.int64).reshape((num_classes,) + dims), 0, -1)
    return LabelVolume(grid=VoxelGrid(np.array(origin), voxel_size, dims), num_classes=num_classes,
                       accumulators=np.ascontiguousarray(accumulators),
                       counts=counts.astype(np.int32).reshape(dims))


def encode_features(features: FeatureImage) -> bytes:
    channels, height, width = features.channels.shape
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, DUMP_VERSION, channels, height, width)
    return (header + np.ascontiguousarray(features.channels, dtype="<f4").tobytes()
            + features.mask.astype(np.uint8).tobytes())


def decode_features(data: bytes) -> FeatureImage:
    fields = _read_header(data, _FEATURE_HEADER, FEATURE_MAGIC, "feature")
    channels, height, width = fields[2:5]
    planes, offset = _take(data, _FEATURE_HEADER.size, channels * height * width, "<f4", "feature")
    mask, _ = _take(data, offset, height * width, "u1", "feature")
    return FeatureImage(planes.astype(np.float32).reshape(channels, height, width),
                        mask.reshape(height, width).astype(bool))


def save_tsdf(path: PathLike, volume: TsdfVolume) -> None:
    Path(path).write_bytes(encode_tsdf(volume))


def load_tsdf(path: PathLike) -> TsdfVolume:
    return decode_tsdf(Path(path).read_bytes())


def save_label_volume(path: PathLike, volume: LabelVolume) -> None:
    Path(path).write_bytes(encode_label_volume(volume))


def load_label_volume(path: PathLike) -> LabelVolume:
    return decode_label_volume(Path(path).read_bytes())


def save_features(path: PathLike, features: FeatureImage) -> None:
    Path(path).write_bytes(encode_features(features))


def load_features(path: PathLike) -> FeatureImage:
    return decode_features(Path(path).read_bytes())
