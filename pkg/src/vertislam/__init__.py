"""Multi-scale fiducial-marker SLAM testbench for rotorcraft takeoff and landing."""

__version__ = "0.1.0"

from .errors import VertiSlamError
from .evaluation import MetricsReport, associate, ate_rmse, availability, rigid_align, rpe_rmse
from .flightsim import (
    Detection,
    DetectionLog,
    FlightProfile,
    GroundTexture,
    Trajectory,
    VisibilityConditions,
    generate_flight_profile,
    marker_visible,
    simulate_observations,
)
from .geometry import CameraModel, CameraRig, Pose, Twist, default_rig, se3_compose, se3_exp, se3_log
from .layout import MarkerLayout, MarkerSpec, generate_nested, generate_non_nested, marker_corners_world
from .pnp import multi_marker_pnp, refine_pose, solve_planar_pnp
from .slam import SlamMode, SlamOptions, SlamResult, run_slam

__all__ = [
    "__version__", "VertiSlamError",
    "MetricsReport", "associate", "ate_rmse", "availability", "rigid_align", "rpe_rmse",
    "Detection", "DetectionLog", "FlightProfile", "GroundTexture", "Trajectory", "VisibilityConditions",
    "generate_flight_profile", "marker_visible", "simulate_observations",
    "CameraModel", "CameraRig", "Pose", "Twist", "default_rig", "se3_compose", "se3_exp", "se3_log",
    "MarkerLayout", "MarkerSpec", "generate_nested", "generate_non_nested", "marker_corners_world",
    "multi_marker_pnp", "refine_pose", "solve_planar_pnp",
    "SlamMode", "SlamOptions", "SlamResult", "run_slam",
]
