import numpy as np
import pytest

from rfsplat.geometry import Pose, ProjectionModel, ScanGrid
from rfsplat.scene import lobby_lite


@pytest.fixture(scope="session")
def lobby():
    return lobby_lite()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pinhole():
    return ProjectionModel("pinhole", np.deg2rad(90.0), np.deg2rad(73.0))


@pytest.fixture(scope="session")
def equirect_grid():
    return ScanGrid(ProjectionModel("equirectangular"), 64, 32)


def random_interior_pose(rng, scene, margin=1.0):
    pos = rng.uniform(scene.bounds_min + margin, scene.bounds_max - margin)
    yaw = rng.uniform(0, 2 * np.pi)
    from rfsplat.geometry import look_at_pose

    fwd = np.array([np.cos(yaw), np.sin(yaw), rng.uniform(-0.2, 0.2)])
    return look_at_pose(pos, pos + fwd)


@pytest.fixture()
def interior_pose(rng, lobby):
    return random_interior_pose(rng, lobby)
