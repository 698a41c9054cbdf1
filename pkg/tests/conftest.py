import numpy as np
import pytest

from partpose import CameraIntrinsics, make_bracket, sample_edge_keypoints


@pytest.fixture(scope="session")
def camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


@pytest.fixture(scope="session")
def small_camera() -> CameraIntrinsics:
    return CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=32.0, width=64, height=64)


@pytest.fixture(scope="session")
def bracket():
    return make_bracket()


@pytest.fixture(scope="session")
def bracket_mesh(bracket):
    return bracket[0]


@pytest.fixture(scope="session")
def bracket_polylines(bracket):
    return bracket[1]


@pytest.fixture(scope="session")
def keypoints(bracket_mesh, bracket_polylines):
    return sample_edge_keypoints(bracket_mesh, bracket_polylines, 700)


@pytest.fixture(scope="session")
def scene_box() -> tuple[np.ndarray, np.ndarray]:
    # Depth span kept below the part's bounding-sphere diameter so one part
    # can never hide another completely.
    return np.array([-0.18, -0.14, 0.55]), np.array([0.18, 0.14, 0.62])
