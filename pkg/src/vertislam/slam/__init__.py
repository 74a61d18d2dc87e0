"""Factor-graph SLAM over fiducial marker detections."""

from .factors import (
    FactorGraph,
    FeatureReprojection,
    MarkerRelative,
    MarkerReprojection,
    PosePrior,
    SlamMode,
    marker_reprojection_jacobians,
    marker_reprojection_residual,
)
from .optimizer import OptimizerOptions, optimize
from .pipeline import FrameStatus, SlamOptions, SlamResult, run_slam

__all__ = [
    "FactorGraph",
    "FeatureReprojection",
    "FrameStatus",
    "MarkerRelative",
    "MarkerReprojection",
    "OptimizerOptions",
    "PosePrior",
    "SlamMode",
    "SlamOptions",
    "SlamResult",
    "marker_reprojection_jacobians",
    "marker_reprojection_residual",
    "optimize",
    "run_slam",
]
