"""Command-line interface: ``vertislam {layout,simulate,slam,eval,experiment,plot}``.

Failures print a single JSON object ``{"error": ..., "message": ...}`` to
stderr and exit with a nonzero status.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

from . import __version__
from . import io as vio
from .errors import ManifestError, VertiSlamError
from .evaluation import ate_rmse, availability, render_table, rpe_rmse
from .experiment import ExperimentConfig, report_from_result, run_experiment
from .flightsim import FlightProfile, GroundTexture, VisibilityConditions, generate_flight_profile, simulate_observations
from .geometry import default_rig
from .layout import LayoutKind, MarkerLayout, generate_nested, generate_non_nested
from .slam import SlamMode, run_slam


class CliError(Exception):
    """Usage error reported in machine-readable form."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _layout_from_kind(kind: str, base_side: float = 1.0, seed_id: int = 0) -> MarkerLayout:
    if LayoutKind(_kind_value(kind)) is LayoutKind.Nested:
        return generate_nested(base_side, seed_id)
    return generate_non_nested(base_side, seed_id)


def _kind_value(kind: str) -> str:
    return {"nested": "Nested", "non_nested": "NonNested", "non-nested": "NonNested"}.get(kind.lower(), kind)


def _resolve_layout(source: str) -> MarkerLayout:
    """A layout kind name or a path to a layout JSON file."""
    p = Path(source)
    if p.suffix == ".json" or p.exists():
        return vio.load_layout(p)
    return _layout_from_kind(source)


def _modes(choice: str) -> list[SlamMode]:
    if choice == "both":
        return [SlamMode.MarkerOnly, SlamMode.MarkerPlusFeature]
    return [SlamMode(choice)]


def _add_profile_args(p):
    d = FlightProfile()
    p.add_argument("--hover-alt", type=float, default=d.hover_alt, help="hover altitude [m]")
    p.add_argument("--traverse-dist", type=float, default=d.traverse_dist, help="traverse length [m]")
    p.add_argument("--speed", type=float, default=d.speed, help="traverse speed [m/s]")
    p.add_argument("--climb-rate", type=float, default=d.climb_rate, help="climb/descent rate [m/s]")
    p.add_argument("--pause", type=float, default=d.pause, help="turnaround pause [s]")
    p.add_argument("--frame-rate", type=float, default=d.frame_rate, help="camera rate [Hz]")


def _add_visibility_args(p, many: bool = False):
    d = VisibilityConditions()
    if many:
        p.add_argument("--illumination", type=float, nargs="+", default=[d.illumination], help="lux values")
        p.add_argument("--sigma", type=float, nargs="+", default=[d.pixel_noise_sigma], help="pixel noise values")
    else:
        p.add_argument("--illumination", type=float, default=d.illumination, help="ambient light [lux]")
        p.add_argument("--sigma", type=float, default=d.pixel_noise_sigma, help="corner noise std [px]")
    p.add_argument("--dropout", type=float, default=d.dropout_prob, help="per-detection drop probability")


def _profile(a) -> FlightProfile:
    return FlightProfile(a.hover_alt, a.traverse_dist, a.speed, a.climb_rate, a.pause, a.frame_rate)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vertislam", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("layout", help="generate a marker layout JSON")
    p.add_argument("--kind", default="nested", help="nested | non_nested")
    p.add_argument("--base-side", type=float, default=1.0, help="side of the largest marker [m]")
    p.add_argument("--seed-id", type=int, default=0, help="first marker id")
    p.add_argument("-o", "--out", required=True, help="output JSON path")

    p = sub.add_parser("simulate", help="simulate a flight and its detections into a run directory")
    p.add_argument("--layout", default="nested", help="layout JSON path or kind")
    p.add_argument("--out", default="run", help="run directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-features", action="store_true", help="do not emit ground-texture features")
    p.add_argument("--texture-points", type=int, default=GroundTexture().n_points)
    _add_profile_args(p)
    _add_visibility_args(p)

    p = sub.add_parser("slam", help="run SLAM on a simulated run directory")
    p.add_argument("--run", default="run", help="run directory containing manifest.json")
    p.add_argument("--mode", default="both", choices=["MarkerOnly", "MarkerPlusFeature", "both"])
    p.add_argument("--no-align", action="store_true", help="report ATE without rigid alignment")

    p = sub.add_parser("eval", help="score an estimate CSV against ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--no-align", action="store_true", help="skip rigid alignment")
    p.add_argument("--rpe-window", type=float, default=None, help="RPE window [s]")

    p = sub.add_parser("experiment", help="run a layout x condition x trial x mode grid")
    p.add_argument("--layout", default="nested", help="layout JSON path or kind")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="both", choices=["MarkerOnly", "MarkerPlusFeature", "both"])
    p.add_argument("--out", default="experiment", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--rpe-window", type=float, default=None, help="RPE window [s]")
    p.add_argument("--no-align", action="store_true", help="report ATE without rigid alignment")
    _add_profile_args(p)
    _add_visibility_args(p, many=True)

    p = sub.add_parser("plot", help="SVG of estimate vs ground truth")
    p.add_argument("--est", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("-o", "--out", required=True, help="output .svg path")
    return ap


def cmd_layout(a) -> int:
    layout = _layout_from_kind(a.kind, a.base_side, a.seed_id)
    vio.save_layout(layout, a.out)
    print(f"wrote {a.out}: {layout.kind.value}, {len(layout.markers)} markers")
    return 0


def cmd_simulate(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    layout_path = out / "layout.json"
    src = Path(a.layout)
    if src.exists():
        layout = vio.load_layout(src)
        if src.resolve() != layout_path.resolve():
            shutil.copyfile(src, layout_path)
    else:
        layout = _layout_from_kind(a.layout)
        vio.save_layout(layout, layout_path)
    profile = _profile(a)
    cond = VisibilityConditions(illumination=a.illumination, pixel_noise_sigma=a.sigma, dropout_prob=a.dropout)
    texture = None if a.no_features else GroundTexture(n_points=a.texture_points)
    rig = default_rig()
    man = vio.RunManifest(
        a.seed, "layout.json", profile.to_dict(), cond.to_dict(), rig.to_dict(), "both",
        hashes={"layout.json": vio.file_sha256(layout_path)},
        extra={"texture": None if texture is None else texture.to_dict()},
    )
    h = man.hash
    gt = generate_flight_profile(profile)
    log_ = simulate_observations(gt, layout, rig, cond, a.seed, texture=texture)
    meta = {"manifest_hash": h}
    vio.save_trajectory(gt, out / "gt.csv", meta)
    vio.save_detections(log_, out / "detections.csv", meta)
    files = ["gt.csv", "detections.csv"]
    if log_.features is not None:
        vio.save_features(log_.features, out / "features.csv", meta)
        files.append("features.csv")
    for f in files:
        man.record_output(out / f, out)
    vio.save_manifest(man, out / "manifest.json")
    print(f"wrote {out}: {log_.total_frames} frames, {len(log_.detections)} detections, "
          f"{len(log_.frames_with_detections())} frames with detections")
    return 0


def _check_embedded(path: Path, meta: dict, h: str) -> None:
    if meta.get("manifest_hash") != h:
        raise ManifestError(f"{path}: embedded manifest hash does not match manifest.json")


def cmd_slam(a) -> int:
    run = Path(a.run)
    man = vio.load_manifest(run / "manifest.json")
    h = man.hash
    layout = vio.load_layout(run / man.layout_path)
    feats = run / "features.csv"
    log_ = vio.load_detections(run / "detections.csv", feats if feats.exists() else None)
    det_meta = vio.read_metadata(run / "detections.csv")
    _check_embedded(run / "detections.csv", det_meta, h)
    gt = vio.load_trajectory(run / "gt.csv")
    rig = man.camera_rig()
    reports = []
    for mode in _modes(a.mode):
        res = run_slam(log_, rig, layout, mode)
        est_path = run / f"estimate_{mode.value}.csv"
        vio.save_estimate(res.trajectory(), res.total_frames, est_path,
                          {"manifest_hash": h, "mode": mode.value, "converged": res.converged,
                           "final_cost": vio.fmt(res.final_cost)})
        reports.append(report_from_result(
            res, gt, align=not a.no_align, illumination=man.visibility["illumination"],
            noise=man.visibility["pixel_noise_sigma"], layout=layout.kind.value, mode=mode.value,
            trial=0, seed=man.seed))
    vio.save_metrics(reports, run / "metrics.csv", {"manifest_hash": h})
    sys.stdout.write(render_table(reports, [m.value for m in _modes(a.mode)]))
    return 0


def cmd_eval(a) -> int:
    est = vio.load_estimate(a.est)
    gt = vio.load_trajectory(a.gt)
    if est.n_estimated == 0:
        print("ATE -")
    else:
        print(f"ATE {ate_rmse(est.trajectory, gt, align=not a.no_align):.3f}")
    total = est.total_frames if est.total_frames is not None else len(gt)
    print(f"availability {availability(est.n_estimated, total):.2f}")
    if a.rpe_window is not None and est.n_estimated > 0:
        print(f"RPE {rpe_rmse(est.trajectory, gt, a.rpe_window):.3f}")
    return 0


def cmd_experiment(a) -> int:
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    layout = _resolve_layout(a.layout)
    vio.save_layout(layout, out / "layout.json")
    profile = _profile(a)
    base = VisibilityConditions(dropout_prob=a.dropout)
    modes = _modes(a.mode)
    rig = default_rig()
    cfg = ExperimentConfig(layout, rig, profile, base, tuple(a.sigma), tuple(a.illumination), a.trials, a.seed,
                           tuple(modes), a.rpe_window, align=not a.no_align)
    man = vio.RunManifest(
        a.seed, "layout.json", profile.to_dict(), base.to_dict(), rig.to_dict(), a.mode,
        hashes={"layout.json": vio.file_sha256(out / "layout.json")},
        extra={"sigmas": list(cfg.sigmas), "illuminations": list(cfg.illuminations), "trials": a.trials,
               "rpe_window": a.rpe_window, "align": cfg.align},
    )
    h = man.hash
    reports = run_experiment(cfg, jobs=a.jobs)
    vio.save_metrics(reports, out / "metrics.csv", {"manifest_hash": h})
    table = render_table(reports, [m.value for m in modes])
    (out / "table.txt").write_text(f"# manifest_hash={h}\n" + table)
    for f in ("metrics.csv", "table.txt"):
        man.record_output(out / f, out)
    vio.save_manifest(man, out / "manifest.json")
    sys.stdout.write(table)
    return 0


def cmd_plot(a) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    est = vio.load_estimate(a.est)
    gt = vio.load_trajectory(a.gt)
    h = est.meta.get("manifest_hash", "")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    g, e = gt.positions, est.trajectory.positions
    ax1.plot(g[:, 0], g[:, 1], "k-", lw=1, label="ground truth")
    ax2.plot(gt.times, g[:, 2], "k-", lw=1, label="ground truth")
    if len(e):
        ax1.plot(e[:, 0], e[:, 1], "r.", ms=2, label="estimate")
        ax2.plot(est.trajectory.times, e[:, 2], "r.", ms=2, label="estimate")
    ax1.set(xlabel="x [m]", ylabel="y [m]", title="top-down")
    ax1.set_aspect("equal", adjustable="datalim")
    ax2.set(xlabel="t [s]", ylabel="altitude [m]", title="altitude")
    ax1.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(a.out, format="svg", metadata={"Description": f"manifest_hash={h}", "Date": None})
    plt.close(fig)
    print(f"wrote {a.out}")
    return 0


COMMANDS = {
    "layout": cmd_layout, "simulate": cmd_simulate, "slam": cmd_slam, "eval": cmd_eval,
    "experiment": cmd_experiment, "plot": cmd_plot,
}


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except CliError as err:
        return _fail("UsageError", str(err), 2)
    try:
        return COMMANDS[a.command](a)
    except (VertiSlamError, OSError, ValueError, KeyError) as err:
        return _fail(type(err).__name__, str(err), 1)


if __name__ == "__main__":
    sys.exit(main())
