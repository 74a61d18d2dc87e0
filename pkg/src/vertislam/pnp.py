"""Planar PnP for co-planar, multi-scale marker layouts.

Pipeline: normalized DLT homography -> K^-1 H decomposition into two
planar-ambiguity candidates -> Gauss-Newton refinement of each on SE(3) ->
keep the lower-cost candidate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateConfigurationError, LayoutError, PnPDivergenceError
from .geometry import CameraModel, Pose, nearest_rotation, se3_exp, skew
from .layout import MarkerLayout, marker_corners_world


@dataclass(frozen=True)
class Correspondence:
    world: tuple[float, float, float]
    pixel: tuple[float, float]


@dataclass(frozen=True)
class PnPResult:
    """Pose of the layout frame in the camera frame (``T_camera_layout``).

    ``rms_reprojection`` is the RMS over all residual components (u and v).
    """

    pose: Pose
    rms_reprojection: float
    iterations: int
    cost: float = 0.0


def _as_arrays(corrs, pixels=None):
    if pixels is not None:
        return np.asarray(corrs, dtype=float), np.asarray(pixels, dtype=float)
    world = np.array([c.world for c in corrs], dtype=float)
    px = np.array([c.pixel for c in corrs], dtype=float)
    return world, px


def _hartley(points: np.ndarray) -> np.ndarray:
    c = points.mean(axis=0)
    d = np.sqrt(((points - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def homography_dlt(world, pixels=None, rank_tol: float = 1e-10) -> np.ndarray:
    """Normalized DLT homography mapping layout-plane (x, y) to pixels.

    Accepts either a sequence of ``Correspondence`` or two arrays
    ``world (N, 2|3)`` and ``pixels (N, 2)``.
    """
    w, px = _as_arrays(world, pixels)
    if len(w) < 4 or len(w) != len(px):
        raise DegenerateConfigurationError("need at least 4 correspondences")
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(px))):
        raise DegenerateConfigurationError("correspondences must be finite")
    if w.shape[1] == 3 and np.any(np.abs(w[:, 2]) > 1e-9):
        raise DegenerateConfigurationError("world points must lie in the z=0 layout plane")
    xy = w[:, :2]
    sv = np.linalg.svd(xy - xy.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateConfigurationError("world points are collinear")
    Tw, Tp = _hartley(xy), _hartley(px)
    a = (np.column_stack([xy, np.ones(len(xy))]) @ Tw.T)
    b = (np.column_stack([px, np.ones(len(px))]) @ Tp.T)
    n = len(a)
    A = np.zeros((2 * n, 9))
    A[0::2, 0:3] = a
    A[0::2, 6:9] = -b[:, 0:1] * a
    A[1::2, 3:6] = a
    A[1::2, 6:9] = -b[:, 1:2] * a
    _, S, Vt = np.linalg.svd(A)
    if S[7] <= rank_tol * S[0]:
        raise DegenerateConfigurationError("rank-deficient DLT system")
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tp) @ Hn @ Tw
    if abs(H[2, 2]) > 1e-12 * np.abs(H).max():
        H = H / H[2, 2]
    else:
        H = H / np.linalg.norm(H)
    return H


def _ray_alignment(v: np.ndarray) -> np.ndarray:
    """Rotation taking +z onto the unit vector ``v`` about the axis z x v."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, v)
    s = np.linalg.norm(axis)
    c = float(v @ z)
    if s < 1e-15:
        return np.eye(3)
    K = skew(axis / s)
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def _translation_for(R: np.ndarray, xy: np.ndarray, norm_pts: np.ndarray) -> np.ndarray:
    # linear least squares for t given R: x*(r3.P + tz) = r1.P + tx, same for y
    P = np.column_stack([xy, np.zeros(len(xy))]) @ R.T
    x, y = norm_pts[:, 0], norm_pts[:, 1]
    n = len(xy)
    A = np.zeros((2 * n, 3))
    rhs = np.zeros(2 * n)
    A[0::2, 0] = 1.0
    A[0::2, 2] = -x
    rhs[0::2] = x * P[:, 2] - P[:, 0]
    A[1::2, 1] = 1.0
    A[1::2, 2] = -y
    rhs[1::2] = y * P[:, 2] - P[:, 1]
    return np.linalg.lstsq(A, rhs, rcond=None)[0]


def pose_from_homography(H, cam: CameraModel, world=None, pixels=None) -> list[Pose]:
    """Two candidate ``T_camera_layout`` poses from a plane-to-image homography.

    The first candidate comes from orthonormalizing ``K^-1 H`` (nearest
    rotation by SVD, translation sign chosen for positive depth). The second
    is its planar-ambiguity mirror: the tilt of the plane reflected about the
    viewing ray through the layout origin. When correspondences are passed,
    translations are re-fit to them by linear least squares.
    """
    H = np.asarray(H, dtype=float)
    if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) <= 1e-14 * np.abs(H).max() ** 3:
        raise DegenerateConfigurationError("homography is singular")
    M = np.linalg.inv(cam.K) @ H
    n1, n2 = np.linalg.norm(M[:, 0]), np.linalg.norm(M[:, 1])
    lam = 2.0 / (n1 + n2)
    if M[2, 2] < 0:
        lam = -lam
    r1, r2, t = lam * M[:, 0], lam * M[:, 1], lam * M[:, 2]
    R1 = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))

    Rv = _ray_alignment(t / np.linalg.norm(t))
    D = np.diag([1.0, 1.0, -1.0])
    R2 = Rv @ D @ Rv.T @ R1 @ D
    R2 = nearest_rotation(R2)

    if world is not None:
        w, px = _as_arrays(world, pixels)
        norm = cam.normalize(px)
        t1 = _translation_for(R1, w[:, :2], norm)
        t2 = _translation_for(R2, w[:, :2], norm)
    else:
        t1 = t
        # keep the image of the layout origin fixed: same direction, same depth
        t2 = t
    return [Pose.from_rt(R1, t1), Pose.from_rt(R2, t2)]


def reprojection_residuals(pose: Pose, world: np.ndarray, pixels: np.ndarray, cam: CameraModel):
    pc = pose.act(world)
    return pixels - cam.project_points(pc), pc


def refine_pose(
    initial: Pose,
    world,
    pixels=None,
    cam: CameraModel | None = None,
    *,
    weights=None,
    max_iter: int = 50,
    step_tol: float = 1e-10,
    max_bad_steps: int = 5,
) -> PnPResult:
    """Gauss-Newton refinement of ``T_camera_layout`` with step-halving.

    Call as ``refine_pose(initial, corrs, cam=cam)`` with correspondences or
    ``refine_pose(initial, world, pixels, cam)`` with arrays. ``weights``
    optionally scales each correspondence's squared residual.

    Raises:
        PnPDivergenceError: five consecutive halved steps failed to lower the cost.
    """
    if cam is None:
        if isinstance(pixels, CameraModel):
            cam, pixels = pixels, None
        else:
            raise TypeError("refine_pose needs a camera model")
    w, px = _as_arrays(world, pixels)
    wts = np.ones(len(w)) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(wts)[:, None]

    def cost_of(pose):
        r, pc = reprojection_residuals(pose, w, px, cam)
        if np.any(pc[:, 2] <= 0):
            return math.inf, r, pc
        return 0.5 * float(np.sum((sw * r) ** 2)), r, pc

    pose = initial
    cost, r, pc = cost_of(pose)
    if not math.isfinite(cost):
        raise DegenerateConfigurationError("initial pose puts points behind the camera")
    # cost resolution implied by double-precision pixel coordinates
    floor = 0.5 * px.size * (1e-15 * max(float(np.abs(px).max(initial=0.0)), 1.0)) ** 2
    iterations = 0
    for _ in range(max_iter):
        _, Jp = cam.project_with_jacobian(pc)
        # d(pc)/d(delta) for pose <- pose @ exp(delta): R @ [-[p]x, I]
        Rm = pose.R
        dP = np.zeros((len(w), 3, 6))
        dP[:, :, :3] = -Rm @ skew(w)
        dP[:, :, 3:] = Rm
        J = -(Jp @ dP)  # residual = observed - projected
        Jw = (sw[:, :, None] * J).reshape(-1, 6)
        rw = (sw * r).reshape(-1)
        try:
            delta = -np.linalg.solve(Jw.T @ Jw, Jw.T @ rw)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(Jw, rw, rcond=None)[0]
        # Gauss-Newton predicted decrease; below round-off level we are converged
        predicted = 0.5 * float(np.sum((Jw @ delta) ** 2))
        if np.linalg.norm(delta) < step_tol or predicted <= 1e-10 * cost + floor:
            break
        iterations += 1
        step = delta
        accepted = False
        for _ in range(max_bad_steps):
            cand = pose @ se3_exp(step)
            c_new, r_new, pc_new = cost_of(cand)
            if c_new <= cost:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            if predicted <= 1e-8 * cost + floor:
                break  # flat valley: no representable descent left
            raise PnPDivergenceError(
                f"cost did not decrease over {max_bad_steps} damped steps (cost {cost:.3e})")
        done = np.linalg.norm(step) < step_tol or cost - c_new <= 1e-12 * cost
        pose, cost, r, pc = cand, c_new, r_new, pc_new
        if done:
            break
    rms = math.sqrt(float(np.mean(r ** 2))) if len(r) else 0.0
    return PnPResult(pose, rms, iterations, cost)


def _positive_depths(pose: Pose, world: np.ndarray) -> int:
    return int(np.sum(pose.act(world)[:, 2] > 0))


def solve_planar_pnp(world, pixels, cam: CameraModel, weights=None) -> PnPResult:
    """Homography initialization and refinement of both ambiguity candidates."""
    w, px = _as_arrays(world, pixels)
    centroid = w.mean(axis=0)
    centroid[2] = 0.0
    wc = w - centroid
    H = homography_dlt(wc, cam.undistort_pixels(px))
    shift = Pose.from_translation(-centroid)
    best = None
    for cand in pose_from_homography(H, cam, wc, px):
        init = cand @ shift
        if _positive_depths(init, w) < len(w):
            continue
        try:
            res = refine_pose(init, w, px, cam, weights=weights)
        except PnPDivergenceError:
            continue
        key = (res.cost, -_positive_depths(res.pose, w))
        if best is None or key < best[0]:
            best = (key, res)
    if best is None:
        raise DegenerateConfigurationError("no homography candidate produced a valid pose")
    return best[1]


def multi_marker_pnp(dets: Sequence, layout: MarkerLayout, cam: CameraModel,
                     weight_by_side: bool = False) -> PnPResult:
    """Joint PnP over all detected markers of one frame and camera.

    ``dets`` are objects with ``marker_id`` and ``corners`` (4x2 pixels), e.g.
    ``flightsim.Detection``. Detections of markers absent from the layout
    raise ``LayoutError``; with ``weight_by_side`` each corner's squared
    residual is weighted by its marker's side length.
    """
    if not dets:
        raise LayoutError("no detections given")
    world, pixels, weights = [], [], []
    for d in dets:
        if d.marker_id not in layout:
            raise LayoutError(f"detection references unknown marker id {d.marker_id}")
        world.append(marker_corners_world(layout, d.marker_id))
        pixels.append(np.asarray(d.corners, dtype=float))
        weights.append(np.full(4, layout.get(d.marker_id).side))
    w = np.concatenate(world)
    px = np.concatenate(pixels)
    return solve_planar_pnp(w, px, cam, np.concatenate(weights) if weight_by_side else None)
