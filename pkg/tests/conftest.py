import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatocc.geometry import Camera, Intrinsics, Pose, look_rotation, surround_rig
from splatocc.voxel_scene import generate_scene

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def rig():
    return surround_rig()


@pytest.fixture(scope="session")
def small_rig():
    return surround_rig(width=48, height=24)


@pytest.fixture(scope="session")
def simple_scene():
    return generate_scene(0, "simple")


@pytest.fixture
def camera():
    """A 32x24 camera at the origin looking along world +x."""
    return Camera(Intrinsics.from_fov(32, 24, 70.0), Pose(look_rotation(0.0), (0.0, 0.0, 1.0)))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
