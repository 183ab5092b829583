import numpy as np
import pytest
from PIL import Image

from app.core.errors import FormatError, TruncatedPayloadError
from app.models.camera import CameraIntrinsics
from app.models.images import FeatureImage
from app.models.volume import LabelVolume, TsdfVolume
from app.services import file_service
from app.services.render_service import look_at


def test_depth_pgm_is_big_endian_16_bit():
    depth = np.array([[0, 1], [258, 65535]], dtype=np.uint16)
    data = file_service.encode_pgm(depth)
    assert data.startswith(b"P5\n2 2\n65535\n")
    assert data[-8:] == b"\x00\x00\x00\x01\x01\x02\xff\xff"
    np.testing.assert_array_equal(file_service.decode_pgm(data), depth)


def test_pgm_header_comments_and_truncation():
    image = file_service.decode_pgm(b"P5\n# rendered\n3 1\n255\n\x01\x02\xff")
    assert image.tolist() == [[1, 2, 255]]
    with pytest.raises(TruncatedPayloadError):
        file_service.decode_pgm(b"P5\n3 1\n255\n\x01\x02")
    with pytest.raises(FormatError):
        file_service.decode_pgm(b"P6\n1 1\n255\n\x00")


def test_rasters_open_in_standard_image_readers(tmp_path):
    depth = np.array([[0, 999], [4096, 65535]], dtype=np.uint16)
    labels = np.array([[0, 4], [2, 255]], dtype=np.uint8)
    file_service.write_depth(tmp_path / "depth.pgm", depth)
    file_service.write_labels(tmp_path / "labels.pgm", labels)
    with Image.open(tmp_path / "depth.pgm") as image:
        assert image.mode == "I"
        np.testing.assert_array_equal(np.asarray(image), depth)
    with Image.open(tmp_path / "labels.pgm") as image:
        assert image.mode == "L"
        np.testing.assert_array_equal(np.asarray(image), labels)


def test_depth_reader_requires_16_bit(tmp_path):
    path = tmp_path / "labels.pgm"
    file_service.write_labels(path, np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(FormatError):
        file_service.read_depth(path)


def test_pose_file_layout():
    intrinsics = CameraIntrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)
    pose = look_at((2.0, 1.5, 0.8), (2.0, 0.9, 3.0))
    text = file_service.format_pose(intrinsics, pose)
    lines = text.splitlines()
    assert lines[0] == "60 60 39.5 29.5 80 60"
    assert len(lines) == 4
    assert lines[1].split()[3] == "2"
    parsed_intrinsics, parsed_pose = file_service.parse_pose(text)
    assert parsed_intrinsics == intrinsics
    assert np.array_equal(parsed_pose.matrix34(), pose.matrix34())


def test_pose_file_rejects_non_rigid_matrix():
    text = "60 60 39.5 29.5 80 60\n2 0 0 0\n0 1 0 0\n0 0 1 0\n"
    with pytest.raises(FormatError):
        file_service.parse_pose(text)


def test_frames_are_listed_in_order(tmp_path, small_intrinsics):
    depth = np.full(small_intrinsics.shape, 1500, dtype=np.uint16)
    labels = np.full(small_intrinsics.shape, 2, dtype=np.uint8)
    pose = look_at((0.0, 1.0, 0.0), (0.0, 1.0, 1.0))
    for index in (3, 0, 11):
        file_service.write_frame(tmp_path, index, depth, labels, small_intrinsics, pose)
    (tmp_path / "notes.txt").write_text("not a frame")
    assert file_service.list_frames(tmp_path) == [0, 3, 11]
    frame = file_service.read_frame(tmp_path, 11)
    assert frame.index == 11
    np.testing.assert_array_equal(frame.depth, depth)
    np.testing.assert_array_equal(frame.labels, labels)


def test_tsdf_dump_layout(tmp_path):
    volume = TsdfVolume.for_bounds((np.zeros(3), np.ones(3)), dim=4, margin=0.0)
    volume.tsdf[1, 2, 3] = -0.25
    volume.weight[1, 2, 3] = 7.0
    data = file_service.encode_tsdf(volume)
    assert data[:8] == b"SFTSDF\x00\x00"
    assert len(data) == file_service._TSDF_HEADER.size + 2 * 4 * 64
    file_service.save_tsdf(tmp_path / "tsdf.bin", volume)
    loaded = file_service.load_tsdf(tmp_path / "tsdf.bin")
    assert loaded.tsdf[1, 2, 3] == np.float32(-0.25)
    assert loaded.mu == volume.mu
    assert file_service.encode_tsdf(loaded) == data


def test_label_dump_is_planar_and_checked():
    volume = LabelVolume(grid=TsdfVolume.for_bounds((np.zeros(3), np.ones(3)), dim=2, margin=0.0).grid,
                         num_classes=3)
    volume.accumulators[0, 0, 1] = [-5, -1, -7]
    volume.counts[0, 0, 1] = 1
    data = file_service.encode_label_volume(volume)
    body = np.frombuffer(data, dtype="<i8", count=24, offset=file_service._LABEL_HEADER.size)
    # class planes follow each other, voxel (0, 0, 1) is the second entry of each plane
    assert body[1] == -5 and body[9] == -1 and body[17] == -7
    decoded = file_service.decode_label_volume(data)
    assert decoded.labels()[0, 0, 1] == 1
    with pytest.raises(TruncatedPayloadError):
        file_service.decode_label_volume(data[:-1])
    with pytest.raises(FormatError):
        file_service.decode_label_volume(b"XXXXXXXX" + data[8:])


def test_feature_dump_keeps_mask(tmp_path):
    channels = np.arange(24, dtype=np.float32).reshape(4, 2, 3)
    mask = np.array([[True, False, True], [True, True, False]])
    file_service.save_features(tmp_path / "f.bin", FeatureImage(channels, mask))
    loaded = file_service.load_features(tmp_path / "f.bin")
    np.testing.assert_array_equal(loaded.mask, mask)
    assert loaded.channels[0, 0, 1] == 0.0
    assert loaded.channels[3, 1, 1] == 22.0
