"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``[PASS]``/``[FAIL]`` line; the lines are also collected
into an "acceptance criteria" section of the pytest summary.
"""

import time

import numpy as np
import pytest

from vertislam.cli import main
from vertislam.evaluation import ate_rmse, render_table
from vertislam.experiment import report_from_result
from vertislam.flightsim import Detection, Trajectory, VisibilityConditions, marker_visible, simulate_observations
from vertislam.geometry import Pose, se3_exp
from vertislam.io import load_layout, save_layout
from vertislam.layout import all_corners, generate_nested, generate_non_nested, square_corners
from vertislam.pnp import multi_marker_pnp, solve_planar_pnp
from vertislam.slam import SlamMode, marker_reprojection_jacobians, marker_reprojection_residual, run_slam

from .conftest import nadir_camera_pose, random_pose

pytestmark = pytest.mark.acceptance


def test_criterion_1_zero_noise_loop(criterion, flight, nested, rig, clean_log):
    with criterion(1, "zero-noise loop: ATE < 1e-6 m, availability = detection-frame fraction, < 60 s") as c:
        t0 = time.perf_counter()
        res = run_slam(clean_log, rig, nested, SlamMode.MarkerOnly)
        elapsed = time.perf_counter() - t0
        ate = ate_rmse(res.trajectory(), flight)
        expected = len(clean_log.frames_with_detections()) / clean_log.total_frames
        c.detail = f"ATE={ate:.2e} m, availability={res.availability:.4f}, runtime={elapsed:.1f} s"
        assert ate < 1e-6
        assert res.availability == expected
        assert elapsed < 60.0


def test_criterion_2_pnp_oracle(criterion, rig):
    cam = rig[0]
    with criterion(2, "PnP: 1000 noise-free poses exact; 3 nested markers beat 1 at 0.5 px") as c:
        rng = np.random.default_rng(2)
        w = square_corners(1.0)
        worst_t = worst_r = 0.0
        for _ in range(1000):
            T = nadir_camera_pose(rng, 1.0, 5.0, 20.0)
            est = solve_planar_pnp(w, cam.project_points(T.act(w)), cam).pose
            d = T.inverse() @ est
            worst_t = max(worst_t, float(np.linalg.norm(est.translation - T.translation)))
            worst_r = max(worst_r, d.rotation_angle())
        nested = generate_nested()
        errs = {1: [], 3: []}
        for _ in range(300):
            T = nadir_camera_pose(rng, nested.get(1).side, 5.0, 7.0)
            dets = []
            for m in nested.ids:
                px = cam.project_points(T.act(all_corners(nested)[nested.ids.index(m)]))
                dets.append(Detection(0.0, 0, 0, m, px + rng.normal(0, 0.5, px.shape)))
            errs[3].append(np.linalg.norm(multi_marker_pnp(dets, nested, cam).pose.translation - T.translation))
            errs[1].append(np.linalg.norm(multi_marker_pnp(dets[1:2], nested, cam).pose.translation - T.translation))
        med1, med3 = float(np.median(errs[1])), float(np.median(errs[3]))
        c.detail = f"worst {worst_t:.1e} m / {worst_r:.1e} rad; median 3 markers {med3:.4f} m vs 1 marker {med1:.4f} m"
        assert worst_t < 1e-6 and worst_r < 1e-6
        assert med3 < med1


def test_criterion_3_jacobians(criterion, rig):
    with criterion(3, "reprojection Jacobians match central differences (h=1e-6) within 1e-4") as c:
        rng = np.random.default_rng(3)
        h = 1e-6
        worst = 0.0
        for k in range(100):
            cam = rig[k % 2]
            side = rng.uniform(0.05, 2.0)
            marker = Pose.from_axis_angle((0, 0, 1), rng.uniform(-np.pi, np.pi), (*rng.uniform(-5, 5, 2), 0.0))
            # camera 5..20 sides from the marker, body placed so the camera pose follows
            T_cm = nadir_camera_pose(rng, side, 5.0, 20.0)
            T_wc = marker @ T_cm.inverse()
            body = T_wc @ cam.extrinsic.inverse()
            obs = cam.project_points(T_cm.act(square_corners(side))) + rng.normal(0, 1.0, (4, 2))
            _, Jb, Jm = marker_reprojection_jacobians(body, cam, marker, side, obs)
            for i in range(6):
                e = np.zeros(6)
                e[i] = h
                nb = (marker_reprojection_residual(body @ se3_exp(e), cam, marker, side, obs)
                      - marker_reprojection_residual(body @ se3_exp(-e), cam, marker, side, obs)) / (2 * h)
                nm = (marker_reprojection_residual(body, cam, marker @ se3_exp(e), side, obs)
                      - marker_reprojection_residual(body, cam, marker @ se3_exp(-e), side, obs)) / (2 * h)
                worst = max(worst, float(np.abs(nb - Jb[:, i]).max()), float(np.abs(nm - Jm[:, i]).max()))
        c.detail = f"max abs difference {worst:.2e}"
        assert worst < 1e-4


def test_criterion_4_alignment_invariance(criterion, flight, nested, rig, noisy_log):
    with criterion(4, "ATE invariant to rigid transforms of the estimate within 1e-9") as c:
        est = run_slam(noisy_log, rig, nested).trajectory()
        base = ate_rmse(est, flight)
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            T = random_pose(rng, trans_scale=100.0)
            moved = Trajectory(est.times, [T @ p for p in est.poses])
            worst = max(worst, abs(ate_rmse(moved, flight) - base))
        c.detail = f"ATE={base:.4f} m, max deviation {worst:.1e}"
        assert worst < 1e-9


def test_criterion_5_illumination(criterion, flight, nested, rig):
    with criterion(5, "30 lux gives a dash; 1200 and 4000+ lux give solutions") as c:
        reports = []
        for lux in (30.0, 1200.0, 4000.0, 6000.0):
            log_ = simulate_observations(flight, nested, rig, VisibilityConditions(illumination=lux), 5)
            for mode in SlamMode:
                res = run_slam(log_, rig, nested, mode)
                reports.append(report_from_result(res, flight, illumination=lux, noise=0.5,
                                                  layout="Nested", mode=mode.value))
        solved = {(r.illumination, r.mode): r.has_solution for r in reports}
        table = render_table(reports).splitlines()
        c.detail = ", ".join(f"{lux:g} lux {'ok' if solved[(lux, 'MarkerOnly')] else '-'}"
                             for lux in (30.0, 1200.0, 4000.0, 6000.0))
        assert not any(v for (lux, _), v in solved.items() if lux == 30.0)
        assert all(v for (lux, _), v in solved.items() if lux >= 1200.0)
        dark = next(l for l in table[1:] if l.split()[1] == "30")
        assert dark.split()[4:] == ["-"] * 4


def test_criterion_6_availability_pattern(criterion, flight, nested, rig, noisy_log):
    with criterion(6, "availability in (0.7, 0.95), equal to the visibility count") as c:
        res = run_slam(noisy_log, rig, nested)
        cond = VisibilityConditions()
        visible = sum(
            1 for body in flight.poses
            if any(marker_visible(m, Pose(), cam, body, cond) for cam in rig for m in nested.markers)
        )
        expected = visible / len(flight)
        c.detail = f"availability={res.availability:.4f} ({res.n_estimated}/{len(flight)}), oracle {expected:.4f}"
        avail = res.availability
        assert avail == expected
        # blocked: the pad leaves both camera views early in the 40 m traverse (see README)
        assert 0.7 < avail < 0.95


def test_criterion_7_mode_equivalence(criterion, flight, nested, rig):
    with criterion(7, "MarkerOnly vs MarkerPlusFeature: availability within 0.05, ATE ratio in [0.5, 2]") as c:
        avail = {m: [] for m in SlamMode}
        ate = {m: [] for m in SlamMode}
        for seed in range(10):
            log_ = simulate_observations(flight, nested, rig, VisibilityConditions(), (seed, 7))
            for mode in SlamMode:
                res = run_slam(log_, rig, nested, mode)
                avail[mode].append(res.availability)
                ate[mode].append(ate_rmse(res.trajectory(), flight))
        d_avail = abs(np.mean(avail[SlamMode.MarkerOnly]) - np.mean(avail[SlamMode.MarkerPlusFeature]))
        ratio = float(np.mean(ate[SlamMode.MarkerOnly]) / np.mean(ate[SlamMode.MarkerPlusFeature]))
        c.detail = f"availability difference {d_avail:.4f}, ATE ratio {ratio:.3f}"
        assert d_avail <= 0.05
        assert 0.5 <= ratio <= 2.0


def test_criterion_8_layout_invariants(criterion, tmp_path):
    with criterion(8, "20 markers at 1:5:28, 3 nested at 1:4:30, bit-exact round trip") as c:
        nn, ne = generate_non_nested(), generate_nested()
        sides = sorted({m.side for m in nn.markers})
        ratios = [s / sides[0] for s in sides]
        nested_ratios = [m.side / ne.markers[-1].side for m in ne.markers]
        c.detail = f"ratios {', '.join(f'{r:g}' for r in ratios)} and {', '.join(f'{r:g}' for r in nested_ratios)}"
        assert len(nn.markers) == 20 and len(ne.markers) == 3
        assert ratios == pytest.approx([1, 5, 28], rel=1e-12)
        assert nested_ratios == pytest.approx([30, 4, 1], rel=1e-12)
        for layout in (nn, ne):
            save_layout(layout, tmp_path / "l.json")
            again = load_layout(tmp_path / "l.json")
            assert again == layout
            assert all(a.side == b.side and a.pose.q == b.pose.q and a.pose.t == b.pose.t
                       for a, b in zip(again.markers, layout.markers))


def test_criterion_9_determinism(criterion, tmp_path):
    with criterion(9, "identical manifests give byte-identical metrics CSV") as c:
        outs = []
        for name in ("first", "second"):
            d = tmp_path / name
            assert main(["experiment", "--trials", "2", "--seed", "9", "--sigma", "0.5", "1.0",
                         "--out", str(d)]) == 0
            outs.append(d)
        a, b = ((d / "metrics.csv").read_bytes() for d in outs)
        ma, mb = ((d / "manifest.json").read_bytes() for d in outs)
        c.detail = f"{len(a)} bytes"
        assert ma == mb
        assert a == b
