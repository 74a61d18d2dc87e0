import json

import numpy as np
import pytest

from vertislam.errors import ManifestError, SchemaError
from vertislam.evaluation import MetricsReport
from vertislam.flightsim import FlightProfile, Trajectory, VisibilityConditions
from vertislam.io import (
    RunManifest,
    file_sha256,
    load_detections,
    load_estimate,
    load_layout,
    load_manifest,
    load_metrics,
    load_trajectory,
    read_metadata,
    save_detections,
    save_estimate,
    save_features,
    save_layout,
    save_manifest,
    save_metrics,
    save_trajectory,
)


def same_poses(a, b):
    return all(p.q == r.q and p.t == r.t for p, r in zip(a.poses, b.poses)) and len(a) == len(b)


@pytest.mark.parametrize("which", ["nested", "non_nested"])
def test_layout_round_trip(which, request, tmp_path):
    layout = request.getfixturevalue(which)
    save_layout(layout, tmp_path / "l.json", manifest_hash="abc")
    assert load_layout(tmp_path / "l.json") == layout


def test_layout_schema_errors(tmp_path):
    p = tmp_path / "l.json"
    p.write_text("{not json")
    with pytest.raises(SchemaError):
        load_layout(p)
    p.write_text(json.dumps({"kind": "Nested"}))
    with pytest.raises(SchemaError):
        load_layout(p)


def test_trajectory_round_trip_is_bit_exact(flight, tmp_path):
    save_trajectory(flight, tmp_path / "gt.csv", {"manifest_hash": "h"})
    again = load_trajectory(tmp_path / "gt.csv")
    assert np.array_equal(again.times, flight.times)
    assert same_poses(again, flight)
    assert read_metadata(tmp_path / "gt.csv")["manifest_hash"] == "h"


def test_estimate_round_trip(flight, tmp_path):
    sub = Trajectory(flight.times[::3], flight.poses[::3])
    save_estimate(sub, len(flight), tmp_path / "e.csv")
    e = load_estimate(tmp_path / "e.csv")
    assert e.total_frames == len(flight)
    assert same_poses(e.trajectory, sub)


def test_plain_trajectory_loads_as_estimate(flight, tmp_path):
    save_trajectory(flight, tmp_path / "gt.csv")
    assert load_estimate(tmp_path / "gt.csv").total_frames is None


def test_detections_and_features_round_trip(noisy_log, tmp_path):
    save_detections(noisy_log, tmp_path / "d.csv")
    save_features(noisy_log.features, tmp_path / "f.csv")
    again = load_detections(tmp_path / "d.csv", tmp_path / "f.csv")
    assert again.rig_hash == noisy_log.rig_hash and again.total_frames == noisy_log.total_frames
    assert len(again.detections) == len(noisy_log.detections)
    for a, b in zip(again.detections, noisy_log.detections):
        assert (a.timestamp, a.frame, a.camera, a.marker_id) == (b.timestamp, b.frame, b.camera, b.marker_id)
        assert np.array_equal(a.corners, b.corners)
    assert len(again.features) == len(noisy_log.features)
    assert all(np.array_equal(a.pixel, b.pixel) and a.feature_id == b.feature_id
               for a, b in zip(again.features, noisy_log.features))


def test_seven_corner_row_names_line(noisy_log, tmp_path):
    p = tmp_path / "d.csv"
    save_detections(noisy_log, p)
    lines = p.read_text().splitlines()
    k = next(i for i, l in enumerate(lines) if l and l[0].isdigit())
    lines[k] = ",".join(lines[k].split(",")[:-2])  # drop the fourth corner's v and u
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match=f":{k + 1}:"):
        load_detections(p)


def test_bad_header_and_value(flight, tmp_path):
    p = tmp_path / "gt.csv"
    save_trajectory(flight, p)
    text = p.read_text()
    (tmp_path / "h.csv").write_text(text.replace("qw", "qq"))
    with pytest.raises(SchemaError, match="header"):
        load_trajectory(tmp_path / "h.csv")
    lines = text.splitlines()
    k = next(i for i, l in enumerate(lines) if l and l[0].isdigit())
    lines[k] = "nan" + lines[k][lines[k].index(","):]
    (tmp_path / "v.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError, match=f":{k + 1}:"):
        load_trajectory(tmp_path / "v.csv")


def test_metrics_round_trip(tmp_path):
    rows = [
        MetricsReport(0.1234567890123, 0.84, 840, 1000, 0.02, 6000.0, 0.5, "nested", "MarkerOnly", 0, 3),
        MetricsReport(None, 0.0, 0, 1000, None, 30.0, 0.5, "nested", "MarkerOnly", 1, 3),
    ]
    save_metrics(rows, tmp_path / "m.csv", {"manifest_hash": "x"})
    assert load_metrics(tmp_path / "m.csv") == rows


def make_manifest(rig, root, nested):
    save_layout(nested, root / "layout.json")
    m = RunManifest(seed=7, layout_path="layout.json", profile=FlightProfile().to_dict(),
                    visibility=VisibilityConditions().to_dict(), rig=rig.to_dict())
    m.hashes["layout.json"] = file_sha256(root / "layout.json")
    return m


def test_manifest_round_trip(rig, nested, tmp_path):
    m = make_manifest(rig, tmp_path, nested)
    (tmp_path / "out.csv").write_text("x\n")
    m.record_output(tmp_path / "out.csv", tmp_path)
    h = save_manifest(m, tmp_path / "manifest.json")
    again = load_manifest(tmp_path / "manifest.json")
    assert again.hash == h
    assert again.flight_profile() == FlightProfile()
    assert again.visibility_conditions() == VisibilityConditions()
    assert again.camera_rig() == rig


def test_manifest_hash_ignores_outputs(rig, nested, tmp_path):
    m = make_manifest(rig, tmp_path, nested)
    h = m.hash
    m.outputs["a.csv"] = "0" * 64
    assert m.hash == h
    m.seed += 1
    assert m.hash != h


@pytest.mark.parametrize("tamper", ["input", "output", "field", "missing"])
def test_manifest_tamper_detected(rig, nested, tmp_path, tamper):
    m = make_manifest(rig, tmp_path, nested)
    (tmp_path / "out.csv").write_text("x\n")
    m.record_output(tmp_path / "out.csv", tmp_path)
    save_manifest(m, tmp_path / "manifest.json")
    if tamper == "input":
        (tmp_path / "layout.json").write_text((tmp_path / "layout.json").read_text() + " ")
    elif tamper == "output":
        (tmp_path / "out.csv").write_text("y\n")
    elif tamper == "field":
        d = json.loads((tmp_path / "manifest.json").read_text())
        d["seed"] = 8
        (tmp_path / "manifest.json").write_text(json.dumps(d))
    else:
        (tmp_path / "out.csv").unlink()
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "manifest.json")
    load_manifest(tmp_path / "manifest.json", verify=False)
