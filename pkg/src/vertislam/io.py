"""File formats: JSON layouts and manifests, headered CSV for everything tabular.

Numbers are written with 17 significant digits (``repr`` in JSON) so that
every save/load round trip is bit-exact. CSV files start with ``# key=value``
metadata comment lines followed by a header row.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from .errors import ManifestError, SchemaError
from .evaluation import MetricsReport
from .flightsim import Detection, DetectionLog, FeatureObservation, FlightProfile, Trajectory, VisibilityConditions
from .geometry import CameraRig, Pose
from .layout import MarkerLayout

TRAJECTORY_COLUMNS = ["t", "x", "y", "z", "qw", "qx", "qy", "qz"]
DETECTION_COLUMNS = ["t", "frame", "cam", "marker_id"] + [f"{a}{i}" for i in range(4) for a in "uv"]
FEATURE_COLUMNS = ["t", "frame", "cam", "feature_id", "u", "v"]


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    """Everything needed to reproduce a run.

    ``hashes`` maps input file paths (relative to the manifest's directory)
    to their sha256 digests; ``extra`` holds command-specific settings such
    as the experiment grid. ``outputs`` lists digests of files produced
    under this manifest; it is checked on load but, since those files embed
    the manifest hash, it is not part of the hash itself.
    """

    seed: int
    layout_path: str
    profile: dict
    visibility: dict
    rig: dict
    mode: str = "MarkerOnly"
    version: str = __version__
    hashes: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "layout_path": self.layout_path, "profile": self.profile,
            "visibility": self.visibility, "rig": self.rig, "mode": self.mode,
            "version": self.version, "hashes": dict(sorted(self.hashes.items())), "extra": self.extra,
        }

    @property
    def hash(self) -> str:
        return hashlib.sha256(_canonical(self.to_dict()).encode()).hexdigest()

    def record_output(self, path: str | Path, base: str | Path) -> None:
        self.outputs[Path(path).relative_to(base).as_posix()] = file_sha256(path)

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        try:
            return cls(int(d["seed"]), str(d["layout_path"]), dict(d["profile"]), dict(d["visibility"]),
                       dict(d["rig"]), str(d.get("mode", "MarkerOnly")), str(d.get("version", "")),
                       dict(d.get("hashes", {})), dict(d.get("extra", {})), dict(d.get("outputs", {})))
        except KeyError as err:
            raise SchemaError(f"manifest: missing field {err.args[0]!r}") from None

    def flight_profile(self) -> FlightProfile:
        return FlightProfile(**self.profile)

    def visibility_conditions(self) -> VisibilityConditions:
        return VisibilityConditions(**self.visibility)

    def camera_rig(self) -> CameraRig:
        return CameraRig.from_dict(self.rig)


def save_manifest(m: RunManifest, path: str | Path) -> str:
    d = m.to_dict()
    d["manifest_hash"] = m.hash
    d["outputs"] = dict(sorted(m.outputs.items()))
    Path(path).write_text(_canonical(d))
    return m.hash


def load_manifest(path: str | Path, verify: bool = True) -> RunManifest:
    """Load a manifest; with ``verify`` every listed input must match its stored hash.

    Raises:
        ManifestError: a hashed file is missing or changed, or the manifest
            itself was edited after its hash was computed.
    """
    path = Path(path)
    d = _load_json(path)
    m = RunManifest.from_dict(d)
    stored = d.get("manifest_hash")
    if verify:
        if stored is not None and stored != m.hash:
            raise ManifestError(f"{path}: manifest content does not match its recorded hash")
        for rel, digest in {**m.hashes, **m.outputs}.items():
            f = path.parent / rel
            if not f.exists():
                raise ManifestError(f"{f}: file listed in manifest is missing")
            if file_sha256(f) != digest:
                raise ManifestError(f"{f}: content hash does not match the manifest")
    return m


def _load_json(path: Path) -> dict:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise SchemaError(f"{path}:{err.lineno}: invalid JSON ({err.msg})") from None
    if not isinstance(d, dict):
        raise SchemaError(f"{path}:1: expected a JSON object")
    return d


# ------------------------------------------------------------------ layout

def save_layout(layout: MarkerLayout, path: str | Path, manifest_hash: str | None = None) -> None:
    d = layout.to_dict()
    if manifest_hash:
        d["manifest_hash"] = manifest_hash
    Path(path).write_text(_canonical(d))


def load_layout(path: str | Path) -> MarkerLayout:
    d = _load_json(Path(path))
    try:
        return MarkerLayout.from_dict(d)
    except (KeyError, TypeError, ValueError) as err:
        raise SchemaError(f"{path}: invalid layout ({err})") from None


# --------------------------------------------------------------- CSV core

def _write_csv(path: str | Path, meta: dict[str, Any], header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    buf = _io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue())


def _read_csv(path: str | Path, header: Sequence[str]) -> tuple[dict[str, str], list[tuple[int, list[str]]]]:
    """Returns metadata and ``(line_number, fields)`` for each data row."""
    meta: dict[str, str] = {}
    rows: list[tuple[int, list[str]]] = []
    seen_header = False
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            if not line.strip():
                continue
            fields_ = next(csv.reader([line]))
            if not seen_header:
                if fields_ != list(header):
                    raise SchemaError(f"{path}:{lineno}: expected header {','.join(header)}")
                seen_header = True
                continue
            if len(fields_) != len(header):
                raise SchemaError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(fields_)}")
            rows.append((lineno, fields_))
    if not seen_header:
        raise SchemaError(f"{path}:1: missing header row")
    return meta, rows


def read_metadata(path: str | Path) -> dict[str, str]:
    """The ``# key=value`` comment block at the top of a CSV file."""
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if "=" in line:
                k, v = line[1:].rstrip("\n").split("=", 1)
                meta[k.strip()] = v.strip()
    return meta


def _num(path, lineno, name, s, kind=float):
    try:
        v = kind(s)
    except ValueError:
        raise SchemaError(f"{path}:{lineno}: field '{name}' is not a valid {kind.__name__}: {s!r}") from None
    if kind is float and not math.isfinite(v):
        raise SchemaError(f"{path}:{lineno}: field '{name}' is not finite")
    return v


def _meta_int(path, meta, key):
    if key not in meta:
        raise SchemaError(f"{path}:1: missing metadata '{key}'")
    try:
        return int(meta[key])
    except ValueError:
        raise SchemaError(f"{path}:1: metadata '{key}' is not an integer") from None


# -------------------------------------------------------------- trajectory

def _pose_row(t: float, p: Pose) -> list[str]:
    return [fmt(t), *map(fmt, p.t), *map(fmt, p.q)]


def save_trajectory(traj: Trajectory, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    _write_csv(path, meta or {}, TRAJECTORY_COLUMNS,
               (_pose_row(t, p) for t, p in zip(traj.times, traj.poses)))


def _parse_trajectory(path, rows) -> Trajectory:
    times, poses = [], []
    for lineno, f in rows:
        v = [_num(path, lineno, name, s) for name, s in zip(TRAJECTORY_COLUMNS, f)]
        q = tuple(v[4:8])
        if abs(math.sqrt(sum(c * c for c in q)) - 1.0) > 1e-6:
            raise SchemaError(f"{path}:{lineno}: field 'qw..qz' is not a unit quaternion")
        times.append(v[0])
        poses.append(Pose(q, tuple(v[1:4])))
    try:
        return Trajectory(np.array(times), poses)
    except ValueError as err:
        raise SchemaError(f"{path}: {err}") from None


def load_trajectory(path: str | Path) -> Trajectory:
    _, rows = _read_csv(path, TRAJECTORY_COLUMNS)
    return _parse_trajectory(path, rows)


# ---------------------------------------------------------------- estimate

@dataclass
class EstimateFile:
    """An estimate CSV; ``total_frames`` is ``None`` for a bare trajectory file."""

    trajectory: Trajectory
    total_frames: int | None
    meta: dict[str, str]

    @property
    def n_estimated(self) -> int:
        return len(self.trajectory)


def save_estimate(traj: Trajectory, total_frames: int, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    """Trajectory CSV with ``total_frames`` (availability denominator) in its metadata."""
    save_trajectory(traj, path, {"total_frames": total_frames, **(meta or {})})


def load_estimate(path: str | Path) -> EstimateFile:
    meta, rows = _read_csv(path, TRAJECTORY_COLUMNS)
    total = _meta_int(path, meta, "total_frames") if "total_frames" in meta else None
    return EstimateFile(_parse_trajectory(path, rows), total, meta)


# -------------------------------------------------------------- detections

def save_detections(log_: DetectionLog, path: str | Path, meta: dict[str, Any] | None = None) -> None:
    head = {"total_frames": log_.total_frames, "rig_hash": log_.rig_hash, **(meta or {})}
    rows = ([fmt(d.timestamp), str(d.frame), str(d.camera), str(d.marker_id),
             *map(fmt, np.asarray(d.corners).reshape(8))] for d in log_.detections)
    _write_csv(path, head, DETECTION_COLUMNS, rows)


def save_features(features: Sequence[FeatureObservation], path: str | Path, meta: dict[str, Any] | None = None) -> None:
    rows = ([fmt(o.timestamp), str(o.frame), str(o.camera), str(o.feature_id), *map(fmt, o.pixel)]
            for o in features)
    _write_csv(path, meta or {}, FEATURE_COLUMNS, rows)


def load_detections(path: str | Path, features_path: str | Path | None = None) -> DetectionLog:
    meta, rows = _read_csv(path, DETECTION_COLUMNS)
    total = _meta_int(path, meta, "total_frames")
    if "rig_hash" not in meta:
        raise SchemaError(f"{path}:1: missing metadata 'rig_hash'")
    dets = []
    for lineno, f in rows:
        frame = _num(path, lineno, "frame", f[1], int)
        if not 0 <= frame < total:
            raise SchemaError(f"{path}:{lineno}: field 'frame' outside [0, {total})")
        corners = np.array([_num(path, lineno, n, s) for n, s in zip(DETECTION_COLUMNS[4:], f[4:])]).reshape(4, 2)
        dets.append(Detection(_num(path, lineno, "t", f[0]), frame, _num(path, lineno, "cam", f[2], int),
                              _num(path, lineno, "marker_id", f[3], int), corners))
    feats = None
    if features_path is not None:
        _, frows = _read_csv(features_path, FEATURE_COLUMNS)
        feats = []
        for lineno, f in frows:
            frame = _num(features_path, lineno, "frame", f[1], int)
            if not 0 <= frame < total:
                raise SchemaError(f"{features_path}:{lineno}: field 'frame' outside [0, {total})")
            feats.append(FeatureObservation(
                _num(features_path, lineno, "t", f[0]), frame, _num(features_path, lineno, "cam", f[2], int),
                _num(features_path, lineno, "feature_id", f[3], int),
                np.array([_num(features_path, lineno, "u", f[4]), _num(features_path, lineno, "v", f[5])])))
    return DetectionLog(meta["rig_hash"], total, dets, feats)


# ----------------------------------------------------------------- metrics

def metrics_csv(reports: Sequence[MetricsReport], meta: dict[str, Any] | None = None) -> str:
    buf = _io.StringIO()
    for k, v in (meta or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsReport.csv_header())
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def save_metrics(reports: Sequence[MetricsReport], path: str | Path, meta: dict[str, Any] | None = None) -> None:
    Path(path).write_text(metrics_csv(reports, meta))


def load_metrics(path: str | Path) -> list[MetricsReport]:
    header = MetricsReport.csv_header()
    _, rows = _read_csv(path, header)
    out = []
    for lineno, f in rows:
        try:
            out.append(MetricsReport.from_csv_row(dict(zip(header, f))))
        except ValueError as err:
            raise SchemaError(f"{path}:{lineno}: {err}") from None
    return out
