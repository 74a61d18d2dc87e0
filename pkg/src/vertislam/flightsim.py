"""Takeoff/landing trajectory generation and synthetic marker observations."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ProfileError
from .geometry import CameraModel, CameraRig, Pose
from .layout import MarkerLayout, MarkerSpec, square_corners

VFR_RATIO = 8.0


@dataclass(frozen=True)
class FlightProfile:
    """Vertical climb, horizontal out-and-back traverse, vertical landing.

    ``yaw_mode`` is ``"travel"`` (heading follows the direction of travel and
    turns around during the pause) or ``"fixed"`` (heading stays at
    ``heading``).
    """

    hover_alt: float = 5.0
    traverse_dist: float = 40.0
    speed: float = 1.0
    climb_rate: float = 1.0
    pause: float = 3.0
    frame_rate: float = 20.0
    heading: float = 0.0
    yaw_mode: str = "travel"

    def __post_init__(self):
        for name in ("hover_alt", "traverse_dist", "speed", "climb_rate", "pause", "frame_rate"):
            if not getattr(self, name) > 0:
                raise ProfileError(f"{name} must be strictly positive")
        if self.traverse_dist / self.hover_alt < VFR_RATIO:
            raise ProfileError(
                f"traverse_dist/hover_alt = {self.traverse_dist / self.hover_alt:.3g} violates the "
                f"VFR 8:1 horizontal-to-vertical ratio rule"
            )
        if self.yaw_mode not in ("travel", "fixed"):
            raise ProfileError(f"unknown yaw_mode {self.yaw_mode!r}")

    def phase_durations(self) -> tuple[float, float, float, float, float]:
        climb = self.hover_alt / self.climb_rate
        leg = self.traverse_dist / self.speed
        return climb, leg, self.pause, leg, climb

    @property
    def duration(self) -> float:
        return float(sum(self.phase_durations()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Trajectory:
    """Timestamped body poses in the world frame."""

    times: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses differ in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        if not self.poses:
            return np.zeros((0, 3))
        return np.array([p.t for p in self.poses])

    def transformed(self, T: Pose) -> Trajectory:
        return Trajectory(self.times.copy(), [T @ p for p in self.poses])


def generate_flight_profile(p: FlightProfile = FlightProfile()) -> Trajectory:
    """Sample the takeoff/traverse/pause/return/landing profile at ``p.frame_rate``."""
    climb, leg, pause, _, _ = p.phase_durations()
    total = p.duration
    n = int(round(total * p.frame_rate)) + 1
    times = np.arange(n) / p.frame_rate
    ux, uy = math.cos(p.heading), math.sin(p.heading)
    t1, t2, t3, t4 = climb, climb + leg, climb + leg + pause, climb + 2 * leg + pause
    poses = []
    for t in times:
        if t <= t1:
            s, z, yaw = 0.0, min(p.climb_rate * t, p.hover_alt), 0.0
        elif t <= t2:
            s, z, yaw = p.speed * (t - t1), p.hover_alt, 0.0
        elif t <= t3:
            s, z = p.traverse_dist, p.hover_alt
            yaw = math.pi * (t - t2) / pause
        elif t <= t4:
            s, z, yaw = max(p.traverse_dist - p.speed * (t - t3), 0.0), p.hover_alt, math.pi
        else:
            s, z, yaw = 0.0, max(p.hover_alt - p.climb_rate * (t - t4), 0.0), math.pi
        if p.yaw_mode == "fixed":
            yaw = 0.0
        poses.append(Pose.from_axis_angle((0.0, 0.0, 1.0), p.heading + yaw, (s * ux, s * uy, z)))
    return Trajectory(times, poses)


@dataclass(frozen=True)
class VisibilityConditions:
    """Detection model: hard illumination threshold, range band and incidence limit.

    Ranges are expressed in marker side lengths.
    """

    illumination: float = 6000.0
    pixel_noise_sigma: float = 0.5
    min_illumination: float = 100.0
    range_min_ratio: float = 5.0
    range_max_ratio: float = 20.0
    max_incidence: float = 60.0
    dropout_prob: float = 0.0
    feature_max_range: float = 40.0

    def __post_init__(self):
        if not 0 < self.range_min_ratio < self.range_max_ratio:
            raise ProfileError("range ratios must satisfy 0 < min < max")
        if self.pixel_noise_sigma < 0:
            raise ProfileError("pixel_noise_sigma must be non-negative")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ProfileError("dropout_prob must be within [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GroundTexture:
    """Sparse random ground points standing in for runway texture."""

    n_points: int = 50
    x_range: tuple[float, float] = (-41.0, 81.0)
    y_range: tuple[float, float] = (-7.5, 7.5)
    seed: int = 2023

    def points(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        xy = np.column_stack([
            rng.uniform(*self.x_range, self.n_points),
            rng.uniform(*self.y_range, self.n_points),
        ])
        return np.column_stack([xy, np.zeros(self.n_points)])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Detection:
    timestamp: float
    frame: int
    camera: int
    marker_id: int
    corners: np.ndarray  # (4, 2) pixels, layout corner order


@dataclass
class FeatureObservation:
    timestamp: float
    frame: int
    camera: int
    feature_id: int
    pixel: np.ndarray  # (2,)


@dataclass
class DetectionLog:
    rig_hash: str
    total_frames: int
    detections: list[Detection]
    features: list[FeatureObservation] | None = None

    def __post_init__(self):
        for d in self.detections:
            if not 0 <= d.frame < self.total_frames:
                raise ValueError(f"detection frame {d.frame} outside [0, {self.total_frames})")

    def frames_with_detections(self) -> set[int]:
        return {d.frame for d in self.detections}


def _world_to_camera(body: Pose, cam: CameraModel) -> Pose:
    return (body @ cam.extrinsic).inverse()


def _visibility_mask(centers, normals, corners, sides, cam: CameraModel, T_cw: Pose,
                     cond: VisibilityConditions):
    """Evaluate the four detection conditions for a batch of markers.

    Returns the boolean mask and the projected corners ``(N, 4, 2)``.
    """
    n = len(sides)
    if cond.illumination < cond.min_illumination:
        return np.zeros(n, dtype=bool), None
    pc = T_cw.act(corners.reshape(-1, 3)).reshape(n, 4, 3)
    in_front = np.all(pc[..., 2] > 1e-9, axis=1)
    uv = cam.project_points(np.where(in_front[:, None, None], pc, 1.0))
    inside = np.all(cam.in_image(uv), axis=1) & in_front
    cam_center = np.array((T_cw.inverse()).t)
    ray = cam_center - centers
    r = np.linalg.norm(ray, axis=1)
    in_range = (r >= cond.range_min_ratio * sides) & (r <= cond.range_max_ratio * sides)
    cos_inc = np.einsum("ij,ij->i", ray, normals) / np.maximum(r, 1e-300)
    facing = cos_inc >= math.cos(math.radians(cond.max_incidence))
    return inside & in_range & facing, uv


def marker_visible(marker: MarkerSpec, layout_pose: Pose, cam: CameraModel, body_pose: Pose,
                   cond: VisibilityConditions) -> bool:
    """True iff the marker is in frame, within the range band, not too oblique, and lit."""
    pose_w = layout_pose @ marker.pose
    corners = pose_w.act(square_corners(marker.side))[None]
    mask, _ = _visibility_mask(np.array([pose_w.t]), pose_w.R[:, 2][None], corners,
                               np.array([marker.side]), cam, _world_to_camera(body_pose, cam), cond)
    return bool(mask[0])


def _stream(seed, *keys) -> np.random.Generator:
    seed = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng([*seed, *keys])


def simulate_observations(
    traj: Trajectory,
    layout: MarkerLayout,
    rig: CameraRig,
    cond: VisibilityConditions,
    seed: int | Sequence[int],
    *,
    layout_pose: Pose = Pose(),
    texture: GroundTexture | None = GroundTexture(),
) -> DetectionLog:
    """Synthesize what the rig's marker detector (and a feature tracker) would report.

    Noise and dropout for each (frame, camera, marker) come from an RNG keyed
    on that triple, so a detection's noise does not depend on which other
    markers happen to be visible.

    Args:
        seed: integer or sequence of integers (e.g. ``(seed, trial)``).
        texture: ground points to track in marker+feature mode; ``None``
            disables feature output.
    """
    if len(traj) == 0:
        raise ProfileError("cannot simulate an empty trajectory")
    ids = np.array(layout.ids)
    poses_w = [layout_pose @ m.pose for m in layout.markers]
    sides = np.array([m.side for m in layout.markers])
    centers = np.array([p.t for p in poses_w])
    normals = np.array([p.R[:, 2] for p in poses_w])
    corners = np.stack([p.act(square_corners(m.side)) for p, m in zip(poses_w, layout.markers)])
    feat_pts = layout_pose.act(texture.points()) if texture is not None else None
    sigma = cond.pixel_noise_sigma

    detections: list[Detection] = []
    features: list[FeatureObservation] | None = [] if texture is not None else None
    lit = cond.illumination >= cond.min_illumination
    for frame, (t, body) in enumerate(zip(traj.times, traj.poses)):
        for ci, cam in enumerate(rig):
            T_cw = _world_to_camera(body, cam)
            mask, uv = _visibility_mask(centers, normals, corners, sides, cam, T_cw, cond)
            for k in np.flatnonzero(mask):
                rng = _stream(seed, 0, frame, ci, int(ids[k]))
                noisy = uv[k] + (rng.normal(0.0, sigma, (4, 2)) if sigma > 0 else 0.0)
                if cond.dropout_prob > 0 and rng.random() < cond.dropout_prob:
                    continue
                if not np.all(cam.in_image(noisy)):
                    continue
                detections.append(Detection(float(t), frame, ci, int(ids[k]), noisy))
            if features is not None and lit:
                pc = T_cw.act(feat_pts)
                front = (pc[:, 2] > 1e-6) & (np.linalg.norm(pc, axis=1) <= cond.feature_max_range)
                fuv = cam.project_points(np.where(front[:, None], pc, 1.0))
                ok = front & cam.in_image(fuv)
                for j in np.flatnonzero(ok):
                    rng = _stream(seed, 1, frame, ci, int(j))
                    px = fuv[j] + (rng.normal(0.0, sigma, 2) if sigma > 0 else 0.0)
                    if cam.in_image(px):
                        features.append(FeatureObservation(float(t), frame, ci, int(j), px))
    return DetectionLog(rig.description_hash(), len(traj), detections, features)
