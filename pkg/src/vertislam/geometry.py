"""Rigid transforms on SE(3) and the pinhole camera model.

Conventions used everywhere in the package:

* Quaternions are Hamilton, stored ``(w, x, y, z)``.
* A ``Pose`` named ``T_a_b`` maps coordinates expressed in frame ``b`` into
  frame ``a``: ``p_a = R @ p_b + t``. A body pose in the world is therefore
  ``T_world_body``.
* Tangent vectors (twists) are ordered ``(omega, v)``: rotation first.
* Perturbations are applied on the right: ``T <- T @ exp(delta)``.
* Camera frames follow the usual image convention: x right, y down, z along
  the optical axis.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import BehindCameraError, DegenerateAngleError

# Renormalize a quaternion only when its squared norm drifts past this bound,
# so that already-unit quaternions (e.g. loaded from disk) keep their exact bits.
_RENORM_TOL = 1e-14
_SMALL_ANGLE = 1e-6


def _qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def _qrot(q, v):
    # v' = v + 2 w (u x v) + 2 u x (u x v)
    w, x, y, z = q
    vx, vy, vz = v
    cx = y * vz - z * vy
    cy = z * vx - x * vz
    cz = x * vy - y * vx
    ccx = y * cz - z * cy
    ccy = z * cx - x * cz
    ccz = x * cy - y * cx
    return (
        vx + 2.0 * (w * cx + ccx),
        vy + 2.0 * (w * cy + ccy),
        vz + 2.0 * (w * cz + ccz),
    )


def skew(v) -> np.ndarray:
    """Cross-product matrix; supports a trailing axis of size 3."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices from ``(..., 4)`` unit quaternions ``(w, x, y, z)``."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def matrix_to_quat(R) -> tuple[float, float, float, float]:
    """Unit quaternion of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    return tuple(float(c) for c in q)


def nearest_rotation(M) -> np.ndarray:
    """Closest rotation matrix to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform stored as a unit quaternion and a translation (meters)."""

    q: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    t: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = tuple(float(c) for c in self.q)
        t = tuple(float(c) for c in self.t)
        if len(q) != 4 or len(t) != 3:
            raise ValueError("Pose needs a 4-element quaternion and a 3-element translation")
        if not all(math.isfinite(c) for c in q + t):
            raise ValueError("Pose components must be finite")
        n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]
        if n2 < 1e-20:
            raise ValueError("zero quaternion")
        if abs(n2 - 1.0) > _RENORM_TOL:
            n = math.sqrt(n2)
            q = tuple(c / n for c in q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_rt(cls, R, t=(0.0, 0.0, 0.0)) -> Pose:
        return cls(matrix_to_quat(R), tuple(np.asarray(t, dtype=float).ravel()))

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls((1.0, 0.0, 0.0, 0.0), tuple(t))

    @classmethod
    def from_axis_angle(cls, axis, angle: float, t=(0.0, 0.0, 0.0)) -> Pose:
        axis = np.asarray(axis, dtype=float)
        axis = axis / np.linalg.norm(axis)
        s = math.sin(0.5 * angle)
        return cls((math.cos(0.5 * angle), *(s * axis)), tuple(t))

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_matrix(np.array(self.q))

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.t)

    @property
    def quaternion(self) -> np.ndarray:
        return np.array(self.q)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: Pose) -> Pose:
        q = _qmul(self.q, other.q)
        r = _qrot(self.q, other.t)
        return Pose(q, (r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]))

    __matmul__ = compose

    def inverse(self) -> Pose:
        qi = (self.q[0], -self.q[1], -self.q[2], -self.q[3])
        r = _qrot(qi, self.t)
        return Pose(qi, (-r[0], -r[1], -r[2]))

    def act(self, points) -> np.ndarray:
        """Apply the transform to a point or an ``(N, 3)`` array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.translation

    def rotation_angle(self) -> float:
        w = min(1.0, abs(self.q[0]))
        s = math.sqrt(self.q[1] ** 2 + self.q[2] ** 2 + self.q[3] ** 2)
        return 2.0 * math.atan2(s, w)

    def allclose(self, other: Pose, atol: float = 1e-9) -> bool:
        d = self.inverse() @ other
        return d.rotation_angle() <= atol and float(np.linalg.norm(d.translation)) <= atol

    def to_dict(self) -> dict:
        return {"q": list(self.q), "t": list(self.t)}

    @classmethod
    def from_dict(cls, d: dict) -> Pose:
        return cls(tuple(d["q"]), tuple(d["t"]))


@dataclass(frozen=True)
class Twist:
    """Element of se(3): rotational part (radians) and translational part (meters)."""

    rot: tuple[float, float, float] = (0.0, 0.0, 0.0)
    trans: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "rot", tuple(float(c) for c in self.rot))
        object.__setattr__(self, "trans", tuple(float(c) for c in self.trans))

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.rot + self.trans)

    @classmethod
    def from_vector(cls, xi) -> Twist:
        xi = np.asarray(xi, dtype=float)
        return cls(tuple(xi[:3]), tuple(xi[3:6]))


def _so3_coeffs(theta: float):
    """Return (sin(th)/th, (1-cos th)/th^2, (th - sin th)/th^3) with series near zero."""
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    return (
        math.sin(theta) / theta,
        2.0 * math.sin(0.5 * theta) ** 2 / (theta * theta),
        (theta - math.sin(theta)) / (theta ** 3),
    )


def se3_exp(xi) -> Pose:
    """Exponential map from a twist ``(omega, v)`` to a pose."""
    v6 = xi.vector if isinstance(xi, Twist) else np.asarray(xi, dtype=float)
    w = v6[:3]
    v = v6[3:6]
    theta = float(np.linalg.norm(w))
    half = 0.5 * theta
    # sin(theta/2)/theta, series for small angles
    k = 0.5 - theta * theta / 48.0 if theta < _SMALL_ANGLE else math.sin(half) / theta
    q = (math.cos(half), k * w[0], k * w[1], k * w[2])
    _, b, c = _so3_coeffs(theta)
    W = skew(w)
    V = np.eye(3) + b * W + c * (W @ W)
    return Pose(q, tuple(V @ v))


def se3_log(p: Pose, angle_tol: float = 1e-9) -> Twist:
    """Logarithm map; raises ``DegenerateAngleError`` at a rotation of pi."""
    w, x, y, z = p.q
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    theta = 2.0 * math.atan2(s, w)
    if math.pi - theta < angle_tol:
        raise DegenerateAngleError(f"rotation angle {theta!r} too close to pi for log")
    if theta < _SMALL_ANGLE:
        k = 2.0 / w * (1.0 - s * s / (3.0 * w * w)) if w > 0 else 2.0
    else:
        k = theta / s
    omega = np.array([k * x, k * y, k * z])
    W = skew(omega)
    if theta < _SMALL_ANGLE:
        d = 1.0 / 12.0 + theta * theta / 720.0
    else:
        # 1 - (th/2) cot(th/2), avoiding the cancellation in 1 - cos(th)
        d = (1.0 - 0.5 * theta / math.tan(0.5 * theta)) / (theta * theta)
    Vinv = np.eye(3) - 0.5 * W + d * (W @ W)
    return Twist(tuple(omega), tuple(Vinv @ p.translation))


def se3_compose(a: Pose, b: Pose) -> Pose:
    """``a @ b``: apply ``b`` first, then ``a``."""
    return a.compose(b)


def so3_exp_matrix(w) -> np.ndarray:
    """Batched Rodrigues formula for ``(..., 3)`` rotation vectors."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = skew(w)
    small = theta < _SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta ** 2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, 2.0 * np.sin(0.5 * th) ** 2 / (th * th))
    return np.eye(3) + a * W + b * (W @ W)


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint for the ``(omega, v)`` ordering."""
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[3:, :3] = skew(p.translation) @ R
    return A


def ad_matrix(xi) -> np.ndarray:
    """6x6 small adjoint ``ad(xi)`` for the ``(omega, v)`` ordering."""
    xi = np.asarray(xi, dtype=float)
    A = np.zeros((6, 6))
    A[:3, :3] = skew(xi[:3])
    A[3:, 3:] = skew(xi[:3])
    A[3:, :3] = skew(xi[3:6])
    return A


class Projection(NamedTuple):
    u: float
    v: float
    in_image: bool


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with two-term radial distortion.

    ``extrinsic`` is the camera pose in the body frame (``T_body_camera``).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    extrinsic: Pose = field(default_factory=Pose)
    name: str = ""

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def with_default_intrinsics(
        cls, width: int, height: int, extrinsic: Pose | None = None,
        hfov_deg: float = 60.0, name: str = "",
    ) -> CameraModel:
        f = width / (2.0 * math.tan(math.radians(hfov_deg) / 2.0))
        return cls(f, f, width / 2.0, height / 2.0, width, height,
                   extrinsic=extrinsic or Pose(), name=name)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def project(self, point) -> Projection:
        p = np.asarray(point, dtype=float)
        if not p[2] > 0:
            raise BehindCameraError(f"point {p.tolist()} is behind the camera")
        uv = self.project_points(p[None, :])[0]
        return Projection(float(uv[0]), float(uv[1]), bool(self.in_image(uv)))

    def project_points(self, P) -> np.ndarray:
        """Project ``(N, 3)`` camera-frame points; no depth check."""
        P = np.asarray(P, dtype=float)
        x = P[..., 0] / P[..., 2]
        y = P[..., 1] / P[..., 2]
        r2 = x * x + y * y
        d = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        return np.stack([self.cx + self.fx * x * d, self.cy + self.fy * y * d], axis=-1)

    def project_with_jacobian(self, P):
        """Pixels ``(..., 2)`` and d(pixel)/d(point) ``(..., 2, 3)``."""
        P = np.asarray(P, dtype=float)
        iz = 1.0 / P[..., 2]
        x = P[..., 0] * iz
        y = P[..., 1] * iz
        r2 = x * x + y * y
        d = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        dd = 2.0 * (self.k1 + 2.0 * self.k2 * r2)  # d(d)/d(r2) * 2
        uv = np.stack([self.cx + self.fx * x * d, self.cy + self.fy * y * d], axis=-1)
        # d(x*d, y*d)/d(x, y)
        a00 = d + x * x * dd
        a01 = x * y * dd
        a11 = d + y * y * dd
        J = np.zeros(P.shape[:-1] + (2, 3))
        J[..., 0, 0] = self.fx * a00 * iz
        J[..., 0, 1] = self.fx * a01 * iz
        J[..., 0, 2] = -self.fx * (a00 * x + a01 * y) * iz
        J[..., 1, 0] = self.fy * a01 * iz
        J[..., 1, 1] = self.fy * a11 * iz
        J[..., 1, 2] = -self.fy * (a01 * x + a11 * y) * iz
        return uv, J

    def normalize(self, uv, iterations: int = 20) -> np.ndarray:
        """Undistorted normalized coordinates ``(x/z, y/z)`` for pixels."""
        uv = np.asarray(uv, dtype=float)
        xd = (uv[..., 0] - self.cx) / self.fx
        yd = (uv[..., 1] - self.cy) / self.fy
        x, y = xd.copy(), yd.copy()
        if self.k1 != 0.0 or self.k2 != 0.0:
            for _ in range(iterations):
                r2 = x * x + y * y
                d = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
                x, y = xd / d, yd / d
        return np.stack([x, y], axis=-1)

    def undistort_pixels(self, uv) -> np.ndarray:
        """Pixels an ideal (distortion-free) camera with the same K would see."""
        n = self.normalize(uv)
        return np.stack([self.cx + self.fx * n[..., 0], self.cy + self.fy * n[..., 1]], axis=-1)

    def unproject(self, uv, depth) -> np.ndarray:
        n = self.normalize(uv)
        depth = np.asarray(depth, dtype=float)
        return np.stack([n[..., 0] * depth, n[..., 1] * depth, depth * np.ones_like(n[..., 0])], axis=-1)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "k1": self.k1, "k2": self.k2,
            "extrinsic": self.extrinsic.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraModel:
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), float(d.get("k1", 0.0)), float(d.get("k2", 0.0)),
            Pose.from_dict(d["extrinsic"]), d.get("name", ""),
        )


@dataclass(frozen=True)
class CameraRig:
    """Ordered cameras: index 0 is the primary (down-facing) camera."""

    cameras: tuple[CameraModel, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise ValueError("a rig needs at least one camera")

    def __len__(self):
        return len(self.cameras)

    def __getitem__(self, i) -> CameraModel:
        return self.cameras[i]

    def __iter__(self):
        return iter(self.cameras)

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, d: dict) -> CameraRig:
        return cls(tuple(CameraModel.from_dict(c) for c in d["cameras"]))

    def description_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def down_camera_rotation() -> np.ndarray:
    """Camera axes in a FLU body frame for a nadir camera, image-up = forward."""
    return np.column_stack([[0.0, -1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])


def pitched_camera_rotation(angle_from_nadir_deg: float) -> np.ndarray:
    """Camera axes for a camera tilted forward from nadir by the given angle."""
    a = math.radians(angle_from_nadir_deg)
    z = np.array([math.sin(a), 0.0, -math.cos(a)])
    x = np.array([0.0, -1.0, 0.0])
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def default_rig(secondary_offset: Sequence[float] = (0.1, 0.0, 0.0)) -> CameraRig:
    """The binocular rig: 2448x2048 nadir primary, 4096x3000 secondary at 45 deg forward.

    Intrinsics are stand-ins (60 deg horizontal FOV, centered principal point,
    no distortion); the calibrated values were never published.
    """
    primary = CameraModel.with_default_intrinsics(
        2448, 2048, Pose.from_rt(down_camera_rotation()), name="primary")
    secondary = CameraModel.with_default_intrinsics(
        4096, 3000, Pose.from_rt(pitched_camera_rotation(45.0), secondary_offset), name="secondary")
    return CameraRig((primary, secondary))
