"""Sparse Levenberg-Marquardt over the product manifold of poses and points."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..errors import DivergenceError
from ..geometry import Pose, nearest_rotation, quat_to_matrix, skew, so3_exp_matrix
from ..layout import square_corners
from .factors import (
    FactorGraph,
    FeatureReprojection,
    MarkerRelative,
    MarkerReprojection,
    PosePrior,
    marker_relative_residual,
    pose_prior_residual,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerOptions:
    max_iter: int = 100
    lm_lambda0: float = 1e-4
    huber_delta: float = 2.0  # pixels
    tol: float = 1e-8  # relative cost change
    abs_tol: float = 1e-12  # cost considered converged
    step_tol: float = 1e-12
    max_rejections: int = 10


def _batched_V(w):
    theta = np.linalg.norm(w, axis=-1)[..., None, None]
    W = skew(w)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    b = np.where(small, 0.5 - theta ** 2 / 24.0, 2.0 * np.sin(0.5 * th) ** 2 / (th * th))
    c = np.where(small, 1.0 / 6.0 - theta ** 2 / 120.0, (th - np.sin(th)) / (th ** 3))
    return np.eye(3) + b * W + c * (W @ W)


class _Problem:
    """Array view of a factor graph with vectorized residuals and Jacobians."""

    def __init__(self, graph: FactorGraph, huber_delta: float):
        self.graph = graph
        self.delta = huber_delta
        self.body_ids = sorted(graph.bodies)
        self.marker_ids = sorted(graph.markers)
        self.feature_ids = sorted(graph.features)
        nb, nm = len(self.body_ids), len(self.marker_ids)
        self.body_index = {k: i for i, k in enumerate(self.body_ids)}
        self.marker_index = {k: nb + i for i, k in enumerate(self.marker_ids)}
        self.feature_index = {k: i for i, k in enumerate(self.feature_ids)}
        self.n_pose = nb + nm
        self.n_point = len(self.feature_ids)
        self.n_var = 6 * self.n_pose + 3 * self.n_point

        poses = [graph.bodies[k] for k in self.body_ids] + [graph.markers[k] for k in self.marker_ids]
        self.R = quat_to_matrix(np.array([p.q for p in poses])).reshape(-1, 3, 3)
        self.t = np.array([p.t for p in poses]).reshape(-1, 3)
        self.X = np.array([graph.features[k] for k in self.feature_ids], dtype=float).reshape(-1, 3)

        unit = square_corners(1.0)
        self.marker_groups = []
        self.feature_groups = []
        self.priors = []
        self.relatives = []
        mfs = [f for f in graph.factors if isinstance(f, MarkerReprojection)]
        ffs = [f for f in graph.factors if isinstance(f, FeatureReprojection)]
        for ci, cam in enumerate(graph.rig):
            sel = [f for f in mfs if f.camera == ci]
            if sel:
                self.marker_groups.append(dict(
                    cam=cam,
                    bi=np.array([self.body_index[f.frame] for f in sel]),
                    mi=np.array([self.marker_index[f.marker_id] for f in sel]),
                    obs=np.array([np.asarray(f.corners, dtype=float) for f in sel]),
                    corners=np.array([graph.marker_sides[f.marker_id] for f in sel])[:, None, None] * unit,
                ))
            sel = [f for f in ffs if f.camera == ci]
            if sel:
                self.feature_groups.append(dict(
                    cam=cam,
                    bi=np.array([self.body_index[f.frame] for f in sel]),
                    pi=np.array([self.feature_index[f.feature_id] for f in sel]),
                    obs=np.array([np.asarray(f.pixel, dtype=float) for f in sel]),
                ))
        for f in graph.factors:
            if isinstance(f, PosePrior):
                self.priors.append((self.body_index[f.frame], f))
            elif isinstance(f, MarkerRelative):
                self.relatives.append((self.marker_index[f.marker_a], self.marker_index[f.marker_b], f))

    # -- state handling -------------------------------------------------
    def state(self):
        return self.R.copy(), self.t.copy(), self.X.copy()

    def set_state(self, s):
        self.R, self.t, self.X = s

    def retract(self, delta):
        d = delta[: 6 * self.n_pose].reshape(-1, 6)
        w, v = d[:, :3], d[:, 3:]
        R = self.R @ so3_exp_matrix(w)
        t = self.t + np.einsum("nij,nj->ni", self.R, np.einsum("nij,nj->ni", _batched_V(w), v))
        X = self.X + delta[6 * self.n_pose:].reshape(-1, 3)
        return R, t, X

    def pose(self, k) -> Pose:
        return Pose.from_rt(nearest_rotation(self.R[k]), self.t[k])

    def to_graph(self) -> FactorGraph:
        g = self.graph.copy()
        g.bodies = {k: self.pose(self.body_index[k]) for k in self.body_ids}
        g.markers = {k: self.pose(self.marker_index[k]) for k in self.marker_ids}
        g.features = {k: self.X[self.feature_index[k]].copy() for k in self.feature_ids}
        return g

    # -- evaluation -------------------------------------------------------
    def _huber(self, r2):
        d = self.delta
        e = np.sqrt(r2)
        rho = np.where(e <= d, r2, 2.0 * d * e - d * d)
        w = np.where(e <= d, 1.0, d / np.maximum(e, 1e-300))
        return rho, w

    def evaluate(self, state=None, jacobian=True):
        """Robust cost and (optionally) the IRLS-weighted sparse Jacobian and residual."""
        R, t, X = state if state is not None else (self.R, self.t, self.X)
        rows, cols, vals, res = [], [], [], []
        cost = 0.0
        row0 = 0

        def add_block(J, r, col_starts, widths):
            # J: (n, m, sum(widths)); r: (n, m)
            nonlocal row0
            n, m, _ = J.shape
            rr = row0 + np.arange(n * m).reshape(n, m)
            off = 0
            for cs, wdt in zip(col_starts, widths):
                cc = cs[:, None] + np.arange(wdt)
                rows.append(np.broadcast_to(rr[:, :, None], (n, m, wdt)).ravel())
                cols.append(np.broadcast_to(cc[:, None, :], (n, m, wdt)).ravel())
                vals.append(J[:, :, off:off + wdt].ravel())
                off += wdt
            res.append(r.ravel())
            row0 += n * m

        for g in self.marker_groups:
            cam = g["cam"]
            RE, tE = cam.extrinsic.R, cam.extrinsic.translation
            RB, tB = R[g["bi"]], t[g["bi"]]
            RM, tM = R[g["mi"]], t[g["mi"]]
            c = g["corners"]
            pw = np.einsum("fij,fkj->fki", RM, c) + tM[:, None]
            pb = np.einsum("fji,fkj->fki", RB, pw - tB[:, None])
            pc = (pb - tE) @ RE
            valid = np.all(pc[..., 2] > 1e-9, axis=1)
            pc_safe = np.where(valid[:, None, None], pc, 1.0)
            if jacobian:
                uv, Jp = cam.project_with_jacobian(pc_safe)
            else:
                uv = cam.project_points(pc_safe)
            r = (g["obs"] - uv)
            r2 = np.sum(r * r, axis=2)
            rho, w = self._huber(r2)
            rho = np.where(valid[:, None], rho, 0.0)
            cost += 0.5 * float(rho.sum())
            if not jacobian:
                continue
            sw = np.sqrt(np.where(valid[:, None], w, 0.0))
            A = Jp @ RE.T
            J = np.zeros(r.shape[:2] + (2, 12))
            J[..., :3] = -A @ skew(pb)
            J[..., 3:6] = A
            B = np.einsum("fkij,fjl->fkil", A, RB.transpose(0, 2, 1))
            BR = np.einsum("fkij,fjl->fkil", B, RM)
            J[..., 6:9] = BR @ skew(c)
            J[..., 9:12] = -BR
            J *= sw[..., None, None]
            rw = r * sw[..., None]
            n = len(g["bi"])
            add_block(J.reshape(n, 8, 12), rw.reshape(n, 8), [6 * g["bi"], 6 * g["mi"]], [6, 6])

        for g in self.feature_groups:
            cam = g["cam"]
            RE, tE = cam.extrinsic.R, cam.extrinsic.translation
            RB, tB = R[g["bi"]], t[g["bi"]]
            pw = X[g["pi"]]
            pb = np.einsum("fji,fj->fi", RB, pw - tB)
            pc = (pb - tE) @ RE
            valid = pc[:, 2] > 1e-9
            pc_safe = np.where(valid[:, None], pc, 1.0)
            if jacobian:
                uv, Jp = cam.project_with_jacobian(pc_safe)
            else:
                uv = cam.project_points(pc_safe)
            r = g["obs"] - uv
            rho, w = self._huber(np.sum(r * r, axis=1))
            cost += 0.5 * float(np.where(valid, rho, 0.0).sum())
            if not jacobian:
                continue
            sw = np.sqrt(np.where(valid, w, 0.0))
            A = Jp @ RE.T
            J = np.zeros((len(r), 2, 9))
            J[..., :3] = -A @ skew(pb)
            J[..., 3:6] = A
            J[..., 6:9] = -np.einsum("fij,fjl->fil", A, RB.transpose(0, 2, 1))
            J *= sw[:, None, None]
            add_block(J, r * sw[:, None], [6 * g["bi"], 6 * self.n_pose + 3 * g["pi"]], [6, 3])

        for k, f in self.priors:
            r, J = pose_prior_residual(f, Pose.from_rt(R[k], t[k]))
            cost += 0.5 * float(r @ r)
            if jacobian:
                add_block(J[None], r[None], [np.array([6 * k])], [6])

        for a, b, f in self.relatives:
            Ma, Mb = Pose.from_rt(R[a], t[a]), Pose.from_rt(R[b], t[b])
            r, Ja, Jb = marker_relative_residual(f, Ma, Mb)
            cost += 0.5 * float(r @ r)
            if jacobian:
                add_block(np.concatenate([Ja, Jb], axis=1)[None], r[None],
                          [np.array([6 * a]), np.array([6 * b])], [6, 6])

        if not jacobian:
            return cost
        J = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(row0, self.n_var),
        )
        return cost, J, np.concatenate(res)


def optimize(graph: FactorGraph, options: OptimizerOptions = OptimizerOptions()):
    """Refine all states of ``graph`` with robust Levenberg-Marquardt.

    Returns the optimized graph and the accepted cost history (the first
    entry is the initial cost). The input graph is not modified.

    Raises:
        GraphValidationError: structural invariants (e.g. gauge prior) violated.
        DivergenceError: ``max_rejections`` consecutive damping increases
            without a cost decrease; carries a snapshot of the last state.
    """
    graph.validate()
    prob = _Problem(graph, options.huber_delta)
    cost = prob.evaluate(jacobian=False)
    history = [cost]
    lam = options.lm_lambda0
    if prob.n_var == 0 or cost <= options.abs_tol:
        return prob.to_graph(), history
    for it in range(options.max_iter):
        _, J, r = prob.evaluate()
        JT = J.T.tocsr()
        H = (JT @ J).tocsc()
        g = JT @ r
        diag = np.maximum(H.diagonal(), 1e-9)
        rejections = 0
        converged = False
        while True:
            A = H + sp.diags(lam * diag, format="csc")
            delta = spla.spsolve(A, -g)
            scale = math.sqrt(float(np.sum(prob.t ** 2) + np.sum(prob.X ** 2))) + 1.0
            if not np.all(np.isfinite(delta)) or np.linalg.norm(delta) <= options.step_tol * scale:
                converged = True
                break
            cand = prob.retract(delta)
            new_cost = prob.evaluate(cand, jacobian=False)
            if math.isfinite(new_cost) and new_cost < cost:
                prob.set_state(cand)
                lam = max(lam / 10.0, 1e-15)
                break
            lam *= 10.0
            rejections += 1
            if rejections >= options.max_rejections:
                # a model decrease below double-precision cost resolution is convergence
                predicted = -float(g @ delta) - 0.5 * float(delta @ (H @ delta))
                if predicted <= 1e-10 * cost:
                    converged = True
                    break
                raise DivergenceError(
                    f"cost {cost:.6e} did not decrease after {rejections} damping increases",
                    graph=prob.to_graph(), history=history)
        if converged:
            break
        rel = (cost - new_cost) / cost
        cost = new_cost
        history.append(cost)
        log.debug("LM iter %d cost %.6e lambda %.1e", it, cost, lam)
        if rel < options.tol or cost <= options.abs_tol:
            break
    return prob.to_graph(), history
