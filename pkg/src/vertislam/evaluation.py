"""Trajectory metrics: rigid alignment, ATE, RPE and availability."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError
from .flightsim import Trajectory
from .geometry import Pose


class CollinearAlignmentWarning(UserWarning):
    """Matched positions are collinear; rotation about that line is unconstrained."""


def _default_tol(gt: Trajectory) -> float:
    if len(gt) < 2:
        return 0.0
    return 0.5 * float(np.median(np.diff(gt.times)))


def associate(est: Trajectory, gt: Trajectory, tol: float | None = None) -> list[tuple[int, int]]:
    """Nearest-neighbour timestamp matching, ``|t_est - t_gt| <= tol``.

    ``tol`` defaults to half the ground-truth frame period.
    """
    tol = _default_tol(gt) if tol is None else tol
    if len(est) == 0 or len(gt) == 0:
        return []
    idx = np.clip(np.searchsorted(gt.times, est.times), 1, max(len(gt) - 1, 1))
    pairs = []
    for i, j in enumerate(idx):
        cands = [k for k in (j - 1, j) if 0 <= k < len(gt)]
        k = min(cands, key=lambda c: abs(gt.times[c] - est.times[i]))
        if abs(gt.times[k] - est.times[i]) <= tol + 1e-12:
            pairs.append((i, int(k)))
    return pairs


def _matched_positions(est, gt, tol):
    pairs = associate(est, gt, tol)
    if len(pairs) < 3:
        raise AlignmentError(f"need at least 3 timestamp-matched poses, found {len(pairs)}")
    P = np.array([est.poses[i].t for i, _ in pairs])
    Q = np.array([gt.poses[j].t for _, j in pairs])
    return P, Q, pairs


def _umeyama(P: np.ndarray, Q: np.ndarray, with_scale: bool):
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    sv = np.linalg.svd(Pc, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        warnings.warn("matched positions are collinear; alignment rotation is not unique",
                      CollinearAlignmentWarning, stacklevel=3)
    C = Qc.T @ Pc / len(P)
    U, D, Vt = np.linalg.svd(C)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / (Pc ** 2).sum(axis=1).mean()) if with_scale else 1.0
    t = mq - s * R @ mp
    return R, t, s


def rigid_align(est: Trajectory, gt: Trajectory, tol: float | None = None) -> Pose:
    """Rigid transform ``T`` minimizing ``sum |T * p_est - p_gt|^2`` over matched frames.

    Raises:
        AlignmentError: fewer than three matched poses.
    """
    P, Q, _ = _matched_positions(est, gt, tol)
    R, t, _ = _umeyama(P, Q, with_scale=False)
    return Pose.from_rt(R, t)


def similarity_align(est: Trajectory, gt: Trajectory, tol: float | None = None) -> tuple[Pose, float]:
    """Diagnostic sim(3) alignment; returns ``(T, scale)`` with ``p_gt ~ s R p_est + t``."""
    P, Q, _ = _matched_positions(est, gt, tol)
    R, t, s = _umeyama(P, Q, with_scale=True)
    return Pose.from_rt(R, t), s


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = True, tol: float | None = None) -> float:
    """Position RMSE over matched frames, after rigid alignment unless ``align`` is False."""
    P, Q, _ = _matched_positions(est, gt, tol)
    if align:
        R, t, _ = _umeyama(P, Q, with_scale=False)
        P = P @ R.T + t
    return float(np.sqrt(np.mean(np.sum((P - Q) ** 2, axis=1))))


def availability(n_estimated: int, n_total: int) -> float:
    """Fraction of frames that received a pose estimate."""
    if n_total <= 0:
        raise ValueError("availability needs at least one frame")
    if not 0 <= n_estimated <= n_total:
        raise ValueError(f"n_estimated={n_estimated} outside [0, {n_total}]")
    return n_estimated / n_total


def rpe_rmse(est: Trajectory, gt: Trajectory, window: float, tol: float | None = None) -> float:
    """RMSE of relative-displacement error between matched frames ``window`` seconds apart.

    For each matched pair ``(i, j)`` the relative translation of
    ``inv(P_i) P_j`` is compared between estimate and ground truth, so the
    metric needs no global alignment.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if len(gt) < 2 or window > gt.times[-1] - gt.times[0]:
        raise AlignmentError("RPE window is longer than the trajectory")
    tol = _default_tol(gt) if tol is None else tol
    pairs = associate(est, gt, tol)
    if not pairs:
        raise AlignmentError("no timestamp-matched poses")
    t_m = np.array([est.times[i] for i, _ in pairs])
    errs = []
    for a, (ia, ga) in enumerate(pairs):
        b = int(np.searchsorted(t_m, t_m[a] + window - tol - 1e-12))
        if b >= len(pairs) or abs(t_m[b] - t_m[a] - window) > tol + 1e-12:
            continue
        ib, gb = pairs[b]
        d_est = (est.poses[ia].inverse() @ est.poses[ib]).translation
        d_gt = (gt.poses[ga].inverse() @ gt.poses[gb]).translation
        errs.append(float(np.sum((d_est - d_gt) ** 2)))
    if not errs:
        raise AlignmentError("no matched pose pairs separated by the RPE window")
    return math.sqrt(sum(errs) / len(errs))


@dataclass(frozen=True)
class MetricsReport:
    """One row of an experiment table.

    ``ate_rmse`` is ``None`` when the run produced no trajectory (rendered
    as a dash, distinct from an availability of 0).
    """

    ate_rmse: float | None
    availability: float
    n_estimated: int
    n_total: int
    rpe_rmse: float | None = None
    illumination: float = math.nan
    noise: float = math.nan
    layout: str = ""
    mode: str = ""
    trial: int = 0
    seed: int = 0
    gt_uncertainty: str = ""

    def __post_init__(self):
        if self.ate_rmse is not None and self.ate_rmse < 0:
            raise ValueError("ate_rmse must be non-negative")
        if self.n_total > 0 and self.availability != availability(self.n_estimated, self.n_total):
            raise ValueError("availability must equal n_estimated / n_total")

    @property
    def has_solution(self) -> bool:
        return self.ate_rmse is not None

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def csv_row(self) -> list[str]:
        out = []
        for k, v in asdict(self).items():
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(format(v, ".17g"))
            else:
                out.append(str(v))
        return out

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> MetricsReport:
        kw = {}
        for f in fields(cls):
            s = row[f.name]
            if f.name in ("ate_rmse", "rpe_rmse"):
                kw[f.name] = float(s) if s != "" else None
            elif f.name in ("n_estimated", "n_total", "trial", "seed"):
                kw[f.name] = int(s)
            elif f.name in ("availability", "illumination", "noise"):
                kw[f.name] = float(s)
            else:
                kw[f.name] = s
        return cls(**kw)


def _fmt(x: float | None) -> str:
    return "-" if x is None else f"{x:.2f}"


def render_table(reports: Iterable[MetricsReport], modes: Sequence[str] = ("MarkerOnly", "MarkerPlusFeature")) -> str:
    """Plain-text table: one line per (layout, illumination, noise, trial), ATE and availability per mode."""
    rows: dict[tuple, dict[str, MetricsReport]] = {}
    for r in reports:
        rows.setdefault((r.layout, r.illumination, r.noise, r.trial), {})[r.mode] = r
    head = ["layout", "lux", "sigma", "trial"]
    for m in modes:
        head += [f"{m} ATE[m]", f"{m} avail"]
    lines = [head]
    for key in sorted(rows):
        layout, lux, sigma, trial = key
        line = [layout, f"{lux:g}", f"{sigma:g}", str(trial)]
        for m in modes:
            r = rows[key].get(m)
            if r is None:
                line += ["", ""]
            else:
                line += [_fmt(r.ate_rmse), _fmt(r.availability) if r.has_solution else "-"]
        lines.append(line)
    widths = [max(len(l[c]) for l in lines) for c in range(len(head))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(l, widths)).rstrip() for l in lines) + "\n"
