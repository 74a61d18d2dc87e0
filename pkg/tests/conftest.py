from __future__ import annotations

import numpy as np
import pytest

from vertislam.flightsim import VisibilityConditions, generate_flight_profile, simulate_observations
from vertislam.geometry import CameraModel, Pose, default_rig, se3_exp
from vertislam.layout import generate_nested, generate_non_nested


@pytest.fixture(scope="session")
def rig():
    return default_rig()


@pytest.fixture(scope="session")
def nested():
    return generate_nested()


@pytest.fixture(scope="session")
def non_nested():
    return generate_non_nested()


@pytest.fixture(scope="session")
def flight():
    return generate_flight_profile()


@pytest.fixture(scope="session")
def clean_log(flight, nested, rig):
    """Default flight over the nested layout, no pixel noise."""
    return simulate_observations(flight, nested, rig, VisibilityConditions(pixel_noise_sigma=0.0), 0)


@pytest.fixture(scope="session")
def noisy_log(flight, nested, rig):
    return simulate_observations(flight, nested, rig, VisibilityConditions(), 0)


@pytest.fixture
def cam1000():
    return CameraModel(1000.0, 1000.0, 1224.0, 1024.0, 2448, 2048)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, rot_scale=np.pi * 0.9, trans_scale=5.0) -> Pose:
    w = rng.normal(size=3)
    w *= rng.uniform(0, rot_scale) / np.linalg.norm(w)
    return se3_exp(np.concatenate([w, rng.uniform(-trans_scale, trans_scale, 3)]))


def nadir_camera_pose(rng, side: float, lo: float = 5.0, hi: float = 20.0, tilt: float = 0.35) -> Pose:
    """``T_camera_layout`` looking down at the layout origin from a range in [lo, hi] sides."""
    r = rng.uniform(lo, hi) * side
    ax = rng.normal(size=3)
    ax[2] = 0.0
    ax /= np.linalg.norm(ax)
    tilt_R = Pose.from_axis_angle(ax, rng.uniform(0, tilt)).R
    yaw = Pose.from_axis_angle((0, 0, 1), rng.uniform(-np.pi, np.pi)).R
    # camera z axis points down toward the layout (flip x to stay right-handed)
    R_lc = tilt_R @ yaw @ np.diag([1.0, -1.0, -1.0])
    center = R_lc @ np.array([0.0, 0.0, -r])
    return Pose.from_rt(R_lc, center).inverse()


# --- acceptance reporting ---------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"[{status}] criterion {self.number}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return False


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
