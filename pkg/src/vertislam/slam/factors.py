"""Factor graph containers and measurement models."""

from __future__ import annotations

import copy
import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import BehindCameraError, GraphValidationError
from ..geometry import CameraModel, CameraRig, Pose, ad_matrix, adjoint, se3_log, skew
from ..layout import square_corners


class SlamMode(str, enum.Enum):
    MarkerOnly = "MarkerOnly"
    MarkerPlusFeature = "MarkerPlusFeature"


@dataclass
class MarkerReprojection:
    frame: int
    camera: int
    marker_id: int
    corners: np.ndarray  # (4, 2) observed pixels


@dataclass
class FeatureReprojection:
    frame: int
    camera: int
    feature_id: int
    pixel: np.ndarray  # (2,)


@dataclass
class PosePrior:
    """Gauge anchor on a body state; ``weight`` is a square-root information."""

    frame: int
    pose: Pose
    weight: float = 1e4


@dataclass
class MarkerRelative:
    """Known relative pose ``T_a_b`` between two markers of a printed layout."""

    marker_a: int
    marker_b: int
    relative: Pose
    weight: float = 1e3


@dataclass
class FactorGraph:
    rig: CameraRig
    bodies: dict[int, Pose] = field(default_factory=dict)
    markers: dict[int, Pose] = field(default_factory=dict)
    marker_sides: dict[int, float] = field(default_factory=dict)
    features: dict[int, np.ndarray] = field(default_factory=dict)
    factors: list = field(default_factory=list)

    def validate(self) -> None:
        priors = [f for f in self.factors if isinstance(f, PosePrior)]
        if len(priors) != 1:
            raise GraphValidationError(f"expected exactly one pose prior, found {len(priors)}")
        if self.bodies and priors[0].frame != min(self.bodies):
            raise GraphValidationError("the pose prior must sit on the first estimated frame")
        for f in self.factors:
            if isinstance(f, (MarkerReprojection, FeatureReprojection, PosePrior)) and f.frame not in self.bodies:
                raise GraphValidationError(f"factor references missing frame {f.frame}")
            if isinstance(f, (MarkerReprojection, FeatureReprojection)) and not 0 <= f.camera < len(self.rig):
                raise GraphValidationError(f"factor references missing camera {f.camera}")
            if isinstance(f, MarkerReprojection):
                if f.marker_id not in self.markers:
                    raise GraphValidationError(f"factor references missing marker {f.marker_id}")
                if f.marker_id not in self.marker_sides:
                    raise GraphValidationError(f"no side length for marker {f.marker_id}")
            if isinstance(f, FeatureReprojection) and f.feature_id not in self.features:
                raise GraphValidationError(f"factor references missing feature {f.feature_id}")
            if isinstance(f, MarkerRelative) and not (f.marker_a in self.markers and f.marker_b in self.markers):
                raise GraphValidationError("relative factor references a missing marker")

    def copy(self) -> FactorGraph:
        return FactorGraph(
            self.rig, dict(self.bodies), dict(self.markers), dict(self.marker_sides),
            {k: v.copy() for k, v in self.features.items()}, copy.copy(self.factors),
        )

    def transformed(self, T: Pose) -> FactorGraph:
        """All states and the prior moved by a rigid transform of the world frame."""
        g = self.copy()
        g.bodies = {k: T @ v for k, v in self.bodies.items()}
        g.markers = {k: T @ v for k, v in self.markers.items()}
        g.features = {k: T.act(v) for k, v in self.features.items()}
        g.factors = [PosePrior(f.frame, T @ f.pose, f.weight) if isinstance(f, PosePrior) else f
                     for f in self.factors]
        return g


def marker_reprojection_residual(body: Pose, cam: CameraModel, marker: Pose, side: float,
                                 observed) -> np.ndarray:
    """Observed minus predicted corner pixels, flattened to 8 values (u0, v0, ..., u3, v3)."""
    T_cm = (body @ cam.extrinsic).inverse() @ marker
    pc = T_cm.act(square_corners(side))
    if np.any(pc[:, 2] <= 0):
        raise BehindCameraError("marker corner behind camera")
    return (np.asarray(observed, dtype=float) - cam.project_points(pc)).reshape(8)


def marker_reprojection_jacobians(body: Pose, cam: CameraModel, marker: Pose, side: float, observed):
    """Residual and its Jacobians w.r.t. right perturbations of body and marker.

    Returns ``(r (8,), J_body (8, 6), J_marker (8, 6))``; tangent order is
    ``(omega, v)``.
    """
    c = square_corners(side)
    RB, tB = body.R, body.translation
    RM, tM = marker.R, marker.translation
    RE, tE = cam.extrinsic.R, cam.extrinsic.translation
    pw = c @ RM.T + tM
    pb = (pw - tB) @ RB
    pc = (pb - tE) @ RE
    if np.any(pc[:, 2] <= 0):
        raise BehindCameraError("marker corner behind camera")
    uv, Jp = cam.project_with_jacobian(pc)
    A = Jp @ RE.T
    Jb = np.zeros((4, 2, 6))
    Jb[..., :3] = -A @ skew(pb)
    Jb[..., 3:] = A
    B = A @ RB.T
    Jm = np.zeros((4, 2, 6))
    Jm[..., :3] = B @ RM @ skew(c)
    Jm[..., 3:] = -B @ RM
    r = (np.asarray(observed, dtype=float) - uv).reshape(8)
    return r, Jb.reshape(8, 6), Jm.reshape(8, 6)


def right_jacobian_inv_approx(xi) -> np.ndarray:
    # first-order expansion; priors stay close to zero residual
    return np.eye(6) + 0.5 * ad_matrix(xi)


def pose_prior_residual(prior: PosePrior, body: Pose):
    r = se3_log(prior.pose.inverse() @ body).vector
    return prior.weight * r, prior.weight * right_jacobian_inv_approx(r)


def marker_relative_residual(f: MarkerRelative, Ma: Pose, Mb: Pose):
    """Residual and Jacobians (w.r.t. ``Ma``, ``Mb``) of a layout-configuration factor."""
    rel = Ma.inverse() @ Mb
    r = se3_log(f.relative.inverse() @ rel).vector
    Jinv = right_jacobian_inv_approx(r)
    Jb = f.weight * Jinv
    Ja = -f.weight * Jinv @ adjoint(rel.inverse())
    return f.weight * r, Ja, Jb
