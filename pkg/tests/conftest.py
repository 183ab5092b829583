"""
Shared fixtures and the slow-test switch
"""

import numpy as np
import pytest

from app.models.camera import CameraIntrinsics, Pose
from app.models.scene import default_taxonomy
from app.schemas.config import RoomSpec, build_run_config
from app.services.render_service import look_at
from app.services.scene_service import generate_room


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def taxonomy():
    return default_taxonomy()


@pytest.fixture
def small_intrinsics():
    return CameraIntrinsics(fx=60.0, fy=60.0, cx=39.5, cy=29.5, width=80, height=60)


@pytest.fixture
def empty_room():
    """4 x 4 x 2.5 m shell: floor, ceiling and four walls"""
    return generate_room(RoomSpec())


@pytest.fixture
def furnished_room():
    return generate_room(RoomSpec(n_chairs=2, n_tables=1, seed=7))


@pytest.fixture
def room_pose():
    """Inside the 4 m room, 1.5 m up, looking at the far wall and the floor"""
    return look_at((2.0, 1.5, 0.8), (2.0, 0.9, 3.0))


@pytest.fixture
def floor_pose():
    """1 m above the floor, looking straight down (camera y toward +z)"""
    # x right, y toward +z, optical axis -Y
    rotation = np.column_stack([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]])
    return Pose(rotation, np.array([2.0, 1.0, 2.0]))


@pytest.fixture(scope="session")
def tiny_config():
    """Run configuration small enough for the default test run"""
    return build_run_config({
        "width": 64, "height": 48, "fx": 50.0, "fy": 50.0, "cx": 31.5, "cy": 23.5,
        "n_frames": 3, "n_chairs": 1, "n_tables": 1, "seed": 3,
        "grid_dim": 32, "grid_margin": 0.2, "curvature_window": 5, "gravity_samples": 1000,
        "layers": 2, "hidden": 4, "kernel": 3, "epochs": 2, "batch_size": 256,
        "pixels_per_image": 500,
    })
