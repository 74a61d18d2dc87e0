"""Batch marker SLAM (optionally with point features) over a detection log."""

from __future__ import annotations

import enum
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import DegenerateConfigurationError, DivergenceError, PnPDivergenceError, VertiSlamError
from ..flightsim import DetectionLog, Trajectory
from ..geometry import CameraRig, Pose
from ..layout import MarkerLayout, square_corners
from ..pnp import multi_marker_pnp, refine_pose, solve_planar_pnp
from .factors import FactorGraph, FeatureReprojection, MarkerRelative, MarkerReprojection, PosePrior, SlamMode
from .optimizer import OptimizerOptions, optimize

log = logging.getLogger(__name__)


class FrameStatus(str, enum.Enum):
    Estimated = "Estimated"
    NoMeasurement = "NoMeasurement"


@dataclass(frozen=True)
class SlamOptions:
    """Front-end and back-end settings.

    ``frame_stride`` processes every k-th frame only; skipped frames count
    as ``NoMeasurement`` so availability drops accordingly.
    """

    optimizer: OptimizerOptions = OptimizerOptions()
    frame_stride: int = 1
    min_feature_track: int = 6
    prior_weight: float = 1e4
    layout_weight: float = 1e3
    use_layout_config: bool = True
    feature_min_baseline: float = 0.5
    feature_max_rms: float = 5.0


@dataclass
class SlamResult:
    frames: list[int]
    times: np.ndarray
    poses: list[Pose]
    markers: dict[int, Pose]
    features: dict[int, np.ndarray]
    status: list[FrameStatus]
    total_frames: int
    final_cost: float
    converged: bool
    cost_history: list[float] = field(default_factory=list)
    mode: SlamMode = SlamMode.MarkerOnly

    @property
    def n_estimated(self) -> int:
        return len(self.frames)

    @property
    def availability(self) -> float:
        return self.n_estimated / self.total_frames

    def trajectory(self) -> Trajectory:
        return Trajectory(np.asarray(self.times, dtype=float), list(self.poses))


def _best_marker_pose(rig: CameraRig, per_cam, layout: MarkerLayout):
    best = None
    for ci in sorted(per_cam):
        dets = [d for d in per_cam[ci] if d.marker_id in layout]
        if not dets:
            continue
        try:
            res = multi_marker_pnp(dets, layout, rig[ci])
        except (DegenerateConfigurationError, PnPDivergenceError):
            continue
        key = (-len(dets), res.rms_reprojection)
        if best is None or key < best[0]:
            best = (key, ci, res)
    if best is None:
        return None
    _, ci, res = best
    return res.pose.inverse() @ rig[ci].extrinsic.inverse()


def _triangulate(T_wc1: Pose, n1, T_wc2: Pose, n2):
    rows = []
    for T_wc, (x, y) in ((T_wc1, n1), (T_wc2, n2)):
        P = T_wc.inverse().as_matrix()[:3]
        rows.append(x * P[2] - P[0])
        rows.append(y * P[2] - P[1])
    _, _, Vt = np.linalg.svd(np.array(rows))
    Xh = Vt[-1]
    if abs(Xh[3]) < 1e-12:
        return None
    X = Xh[:3] / Xh[3]
    for T_wc in (T_wc1, T_wc2):
        if T_wc.inverse().act(X)[2] <= 0:
            return None
    return X


class _Frontend:
    """Sequential state initialization feeding the batch back-end."""

    def __init__(self, rig, sides, layout, mode, opts: SlamOptions):
        self.rig = rig
        self.sides = sides
        self.layout = layout if (layout is not None and opts.use_layout_config) else None
        self.mode = mode
        self.opts = opts
        self.bodies: dict[int, Pose] = {}
        self.markers: dict[int, Pose] = {}
        self.marker_order: list[int] = []
        self.features: dict[int, np.ndarray] = {}
        self.feature_first: dict[int, tuple[Pose, np.ndarray]] = {}
        self.last_body: Pose | None = None

    def _add_marker(self, mid: int, pose: Pose):
        if mid not in self.markers:
            self.markers[mid] = pose
            self.marker_order.append(mid)

    def init_from_markers(self, per_cam) -> Pose | None:
        if self.layout is not None:
            body = _best_marker_pose(self.rig, per_cam, self.layout)
            if body is not None:
                for ci in sorted(per_cam):
                    for d in per_cam[ci]:
                        self._add_marker(d.marker_id, self.layout.get(d.marker_id).pose)
            return body

        # side-table only: single-marker PnP relative to each detected marker
        rel = []
        for ci in sorted(per_cam):
            cam = self.rig[ci]
            for d in per_cam[ci]:
                try:
                    res = solve_planar_pnp(square_corners(self.sides[d.marker_id]), d.corners, cam)
                except (DegenerateConfigurationError, PnPDivergenceError):
                    continue
                area = _polygon_area(np.asarray(d.corners))
                rel.append((ci, d, res.pose, area))
        if not rel:
            return None
        known = [x for x in rel if x[1].marker_id in self.markers]
        if known:
            ci, d, T_cm, _ = max(known, key=lambda x: x[3])
            cam = self.rig[ci]
            T_cw = T_cm @ self.markers[d.marker_id].inverse()
            world = np.concatenate([self.markers[x[1].marker_id].act(square_corners(self.sides[x[1].marker_id]))
                                    for x in known if x[0] == ci])
            pix = np.concatenate([np.asarray(x[1].corners) for x in known if x[0] == ci])
            try:
                T_cw = refine_pose(T_cw, world, pix, cam).pose
            except VertiSlamError:
                pass
            body = T_cw.inverse() @ cam.extrinsic.inverse()
        else:
            body = self.last_body if self.last_body is not None else Pose()
        for ci, d, T_cm, _ in rel:
            if d.marker_id not in self.markers:
                self._add_marker(d.marker_id, body @ self.rig[ci].extrinsic @ T_cm)
        return body

    def init_from_features(self, obs) -> Pose | None:
        if self.last_body is None:
            return None
        by_cam = defaultdict(list)
        for o in obs:
            if o.feature_id in self.features:
                by_cam[o.camera].append(o)
        if not by_cam:
            return None
        ci = max(sorted(by_cam), key=lambda c: len(by_cam[c]))
        sel = by_cam[ci]
        if len(sel) < self.opts.min_feature_track:
            return None
        cam = self.rig[ci]
        world = np.array([self.features[o.feature_id] for o in sel])
        pix = np.array([o.pixel for o in sel])
        T_cw = (self.last_body @ cam.extrinsic).inverse()
        try:
            res = refine_pose(T_cw, world, pix, cam)
        except VertiSlamError:
            return None
        if res.rms_reprojection > self.opts.feature_max_rms:
            return None
        return res.pose.inverse() @ cam.extrinsic.inverse()

    def track_features(self, body: Pose, obs):
        for o in obs:
            if o.feature_id in self.features:
                continue
            cam = self.rig[o.camera]
            T_wc = body @ cam.extrinsic
            n = cam.normalize(np.asarray(o.pixel))
            first = self.feature_first.get(o.feature_id)
            if first is None:
                self.feature_first[o.feature_id] = (T_wc, n)
                continue
            T_wc1, n1 = first
            if np.linalg.norm(T_wc.translation - T_wc1.translation) < self.opts.feature_min_baseline:
                continue
            X = _triangulate(T_wc1, n1, T_wc, n)
            if X is not None:
                self.features[o.feature_id] = X


def _polygon_area(c: np.ndarray) -> float:
    x, y = c[:, 0], c[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def run_slam(
    log_: DetectionLog,
    rig: CameraRig,
    layout: MarkerLayout | Mapping[int, float],
    mode: SlamMode = SlamMode.MarkerOnly,
    options: SlamOptions | None = None,
) -> SlamResult:
    """Estimate the body trajectory and landmark map from a detection log.

    Args:
        log_: detections (and optional feature tracks) of one flight.
        rig: camera rig; must match the log's rig hash.
        layout: either a full ``MarkerLayout`` (its relative marker
            geometry is then used for initialization and as configuration
            factors) or a plain ``{marker_id: side}`` table.
        mode: marker-only or marker+feature.

    A log without any usable measurement yields an empty trajectory with
    availability 0 rather than an error.
    """
    opts = options or SlamOptions()
    mode = SlamMode(mode)
    if log_.total_frames <= 0:
        raise ValueError("detection log has no frames")
    if rig.description_hash() != log_.rig_hash:
        raise ValueError("camera rig does not match the rig the log was recorded with")
    full_layout = layout if isinstance(layout, MarkerLayout) else None
    sides = full_layout.side_table() if full_layout is not None else {int(k): float(v) for k, v in layout.items()}

    dets_by_frame: dict[int, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    times: dict[int, float] = {}
    for d in log_.detections:
        if d.marker_id not in sides:
            log.warning("ignoring detection of unknown marker %d", d.marker_id)
            continue
        dets_by_frame[d.frame][d.camera].append(d)
        times[d.frame] = d.timestamp
    feats_by_frame: dict[int, list] = defaultdict(list)
    use_features = mode is SlamMode.MarkerPlusFeature and bool(log_.features)
    if use_features:
        for o in log_.features:
            feats_by_frame[o.frame].append(o)
            times.setdefault(o.frame, o.timestamp)

    fe = _Frontend(rig, sides, full_layout, mode, opts)
    for f in range(0, log_.total_frames, opts.frame_stride):
        body = None
        if f in dets_by_frame:
            body = fe.init_from_markers(dets_by_frame[f])
        if body is None and use_features and f in feats_by_frame:
            body = fe.init_from_features(feats_by_frame[f])
        if body is None:
            continue
        fe.bodies[f] = body
        fe.last_body = body
        if use_features and f in feats_by_frame:
            fe.track_features(body, feats_by_frame[f])

    status = [FrameStatus.NoMeasurement] * log_.total_frames
    if not fe.bodies:
        return SlamResult([], np.zeros(0), [], {}, {}, status, log_.total_frames, 0.0, False, [], mode)

    graph = FactorGraph(rig, dict(fe.bodies), dict(fe.markers), {k: sides[k] for k in fe.markers},
                        dict(fe.features))
    first = min(fe.bodies)
    graph.factors.append(PosePrior(first, fe.bodies[first], opts.prior_weight))
    for f in sorted(fe.bodies):
        for ci in sorted(dets_by_frame.get(f, {})):
            for d in dets_by_frame[f][ci]:
                if d.marker_id in graph.markers:
                    graph.factors.append(MarkerReprojection(f, ci, d.marker_id, np.asarray(d.corners)))
        if use_features:
            for o in feats_by_frame.get(f, []):
                if o.feature_id in graph.features:
                    graph.factors.append(FeatureReprojection(f, o.camera, o.feature_id, np.asarray(o.pixel)))
    if fe.layout is not None and len(fe.marker_order) > 1:
        ref = fe.marker_order[0]
        ref_pose = fe.layout.get(ref).pose
        for m in fe.marker_order[1:]:
            graph.factors.append(
                MarkerRelative(ref, m, ref_pose.inverse() @ fe.layout.get(m).pose, opts.layout_weight))

    converged = True
    try:
        graph, history = optimize(graph, opts.optimizer)
    except DivergenceError as err:
        log.warning("optimization diverged: %s", err)
        graph, history = err.graph, err.history
        converged = False

    frames = sorted(graph.bodies)
    for f in frames:
        status[f] = FrameStatus.Estimated
    return SlamResult(
        frames=frames,
        times=np.array([times[f] for f in frames]),
        poses=[graph.bodies[f] for f in frames],
        markers=dict(graph.markers),
        features=dict(graph.features),
        status=status,
        total_frames=log_.total_frames,
        final_cost=history[-1] if history else math.nan,
        converged=converged,
        cost_history=history,
        mode=mode,
    )
