import math
from dataclasses import replace

import numpy as np
import pytest

from vertislam.errors import ProfileError
from vertislam.flightsim import (
    Detection,
    DetectionLog,
    FlightProfile,
    GroundTexture,
    Trajectory,
    VisibilityConditions,
    generate_flight_profile,
    marker_visible,
    simulate_observations,
)
from vertislam.geometry import CameraModel, Pose, down_camera_rotation
from vertislam.layout import MarkerFamily, MarkerSpec, marker_corners_world

# 5 + 40 + 3 + 40 + 5 seconds at 20 Hz, both ends included
DEFAULT_SAMPLES = 1861
DEFAULT_DURATION = 93.0


def nadir_body(x=0.0, y=0.0, z=10.0, yaw=0.0):
    return Pose.from_axis_angle((0, 0, 1), yaw, (x, y, z))


@pytest.fixture
def down_cam():
    return CameraModel.with_default_intrinsics(2448, 2048, Pose.from_rt(down_camera_rotation()))


@pytest.fixture
def one_meter():
    return MarkerSpec(0, MarkerFamily.Custom52h12, 1.0, Pose())


def test_default_profile_duration_and_samples(flight):
    assert FlightProfile().duration == DEFAULT_DURATION
    assert len(flight) == DEFAULT_SAMPLES
    assert flight.times[-1] == pytest.approx(DEFAULT_DURATION)


def test_hover_reached_after_climb(flight):
    k = int(round(5.0 * 20))
    assert flight.times[k] == pytest.approx(5.0)
    p = flight.poses[k].t
    assert p[2] == pytest.approx(5.0, abs=1e-12)
    assert math.hypot(p[0], p[1]) == pytest.approx(0.0, abs=1e-12)


def test_closed_loop(flight):
    first, last = flight.poses[0].translation, flight.poses[-1].translation
    assert np.linalg.norm(first - last) < 1e-9
    assert first[2] == 0.0 and last[2] == pytest.approx(0.0, abs=1e-12)


def test_phases(flight):
    pos = flight.positions
    t = flight.times
    far = pos[np.argmin(np.abs(t - 45.0))]
    assert far == pytest.approx([40.0, 0.0, 5.0], abs=1e-9)
    assert pos[:, 0].max() == pytest.approx(40.0)
    assert pos[:, 2].max() == pytest.approx(5.0)
    # level attitude throughout: body z axis stays vertical
    assert all(abs(p.R[2, 2] - 1.0) < 1e-12 for p in flight.poses)


def test_yaw_faces_travel(flight):
    def heading(t):
        p = flight.poses[int(round(t * 20))]
        return math.atan2(p.R[1, 0], p.R[0, 0])
    assert heading(20.0) == pytest.approx(0.0, abs=1e-12)
    assert abs(heading(60.0)) == pytest.approx(math.pi, abs=1e-12)


def test_fixed_yaw_mode():
    traj = generate_flight_profile(FlightProfile(yaw_mode="fixed"))
    assert all(p.rotation_angle() < 1e-12 for p in traj.poses)


def test_timestamps_strictly_increasing(flight):
    assert np.all(np.diff(flight.times) > 0)
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), [Pose(), Pose()])


def test_vfr_ratio_violation_names_rule():
    with pytest.raises(ProfileError, match="8:1"):
        FlightProfile(hover_alt=10.0, traverse_dist=40.0)
    FlightProfile(hover_alt=5.0, traverse_dist=40.0)  # exactly 8:1 is allowed


@pytest.mark.parametrize("field", ["hover_alt", "traverse_dist", "speed", "climb_rate", "pause", "frame_rate"])
def test_profile_fields_must_be_positive(field):
    with pytest.raises(ProfileError):
        replace(FlightProfile(), **{field: 0.0})


@pytest.mark.parametrize("kwargs", [
    dict(range_min_ratio=0.0), dict(range_min_ratio=20.0, range_max_ratio=5.0),
    dict(pixel_noise_sigma=-0.1), dict(dropout_prob=1.5),
])
def test_visibility_validation(kwargs):
    with pytest.raises(ProfileError):
        VisibilityConditions(**kwargs)


# --- visibility -------------------------------------------------------------

def test_far_marker_invisible(down_cam, one_meter):
    assert not marker_visible(one_meter, Pose(), down_cam, nadir_body(z=30.0), VisibilityConditions())


def test_interior_range_visible(down_cam, one_meter):
    assert marker_visible(one_meter, Pose(), down_cam, nadir_body(z=10.0), VisibilityConditions())


@pytest.mark.parametrize("z,expected", [(4.99, False), (5.0, True), (20.0, True), (20.01, False)])
def test_range_band_edges(down_cam, one_meter, z, expected):
    assert marker_visible(one_meter, Pose(), down_cam, nadir_body(z=z), VisibilityConditions()) is expected


def test_dark_is_invisible(down_cam, one_meter):
    cond = VisibilityConditions(illumination=30.0)
    assert not marker_visible(one_meter, Pose(), down_cam, nadir_body(z=10.0), cond)


def test_out_of_frame_invisible(down_cam, one_meter):
    # 10 m up, 8 m to the side: outside the 60 degree cone of a nadir camera
    assert not marker_visible(one_meter, Pose(), down_cam, nadir_body(x=8.0, z=10.0), VisibilityConditions())


def test_incidence_limit(one_meter):
    # camera looking straight at the marker from a grazing elevation
    def cam_looking_at(elev_deg):
        r = 10.0
        e = math.radians(elev_deg)
        center = np.array([r * math.cos(e), 0.0, r * math.sin(e)])
        z = -center / r
        x = np.array([0.0, 1.0, 0.0])
        y = np.cross(z, x)
        return CameraModel.with_default_intrinsics(2448, 2048, Pose.from_rt(np.column_stack([x, y, z]))), \
            Pose.from_translation(center)
    cam, body = cam_looking_at(35.0)  # 55 degrees from the normal
    assert marker_visible(one_meter, Pose(), cam, body, VisibilityConditions())
    cam, body = cam_looking_at(25.0)  # 65 degrees from the normal
    assert not marker_visible(one_meter, Pose(), cam, body, VisibilityConditions())


def test_layout_pose_moves_markers(down_cam, one_meter):
    shifted = Pose.from_translation((50.0, 0.0, 0.0))
    cond = VisibilityConditions()
    assert marker_visible(one_meter, shifted, down_cam, nadir_body(x=50.0), cond)
    assert not marker_visible(one_meter, shifted, down_cam, nadir_body(), cond)


# --- simulation -------------------------------------------------------------

def test_noiseless_corners_are_exact(flight, nested, rig, clean_log):
    for d in clean_log.detections[::7]:
        cam = rig[d.camera]
        T_cw = (flight.poses[d.frame] @ cam.extrinsic).inverse()
        expected = cam.project_points(T_cw.act(marker_corners_world(nested, d.marker_id)))
        assert np.array_equal(d.corners, expected)
        assert np.all(cam.in_image(d.corners))


def test_same_seed_bit_identical(flight, nested, rig):
    a = simulate_observations(flight, nested, rig, VisibilityConditions(dropout_prob=0.2), 3)
    b = simulate_observations(flight, nested, rig, VisibilityConditions(dropout_prob=0.2), 3)
    assert len(a.detections) == len(b.detections)
    assert all(x.frame == y.frame and x.marker_id == y.marker_id and np.array_equal(x.corners, y.corners)
               for x, y in zip(a.detections, b.detections))
    assert all(np.array_equal(x.pixel, y.pixel) for x, y in zip(a.features, b.features))


def test_different_seed_differs(flight, nested, rig):
    a = simulate_observations(flight, nested, rig, VisibilityConditions(), 1)
    b = simulate_observations(flight, nested, rig, VisibilityConditions(), 2)
    assert not np.array_equal(a.detections[0].corners, b.detections[0].corners)


def test_dark_flight_has_no_detections(flight, nested, rig):
    log_ = simulate_observations(flight, nested, rig, VisibilityConditions(illumination=30.0), 0)
    assert log_.detections == [] and log_.features == []
    assert log_.total_frames == DEFAULT_SAMPLES


def test_empty_trajectory_rejected(nested, rig):
    with pytest.raises(ProfileError):
        simulate_observations(Trajectory(np.zeros(0), []), nested, rig, VisibilityConditions(), 0)


def test_detection_count_matches_scalar_oracle(flight, nested, rig, clean_log):
    # count visible (frame, camera, marker) triples one call at a time
    cond = VisibilityConditions(pixel_noise_sigma=0.0)
    expected = {
        (f, ci, m.id)
        for f, body in enumerate(flight.poses[::5])
        for ci, cam in enumerate(rig)
        for m in nested.markers
        if marker_visible(m, Pose(), cam, body, cond)
    }
    got = {(d.frame // 5, d.camera, d.marker_id) for d in clean_log.detections if d.frame % 5 == 0}
    assert got == expected


def test_mid_traverse_has_no_small_marker_detections(flight, nested, clean_log):
    small = min(nested.markers, key=lambda m: m.side)
    limit = 20.0 * small.side
    for d in clean_log.detections:
        if d.marker_id == small.id:
            assert np.linalg.norm(flight.poses[d.frame].translation) <= limit + 1e-9
    mid = {d.frame for d in clean_log.detections if 20.0 <= flight.times[d.frame] <= 70.0}
    assert not mid


def test_noise_statistics(rig, nested):
    # hovering 10 m above the layout only the 1 m marker is in its range band
    sigma = 0.7
    n = 2500
    traj = Trajectory(np.arange(n) * 0.05, [nadir_body(z=10.0)] * n)
    clean = simulate_observations(traj, nested, rig, VisibilityConditions(pixel_noise_sigma=0.0), 0, texture=None)
    noisy = simulate_observations(traj, nested, rig, VisibilityConditions(pixel_noise_sigma=sigma), 0, texture=None)
    err = np.concatenate([(b.corners - a.corners) for a, b in zip(clean.detections, noisy.detections)])
    assert len(err) >= 10**4
    for axis in range(2):
        assert abs(err[:, axis].std() - sigma) < 0.05 * sigma
        assert abs(err[:, axis].mean()) < 0.05 * sigma


def test_visibility_is_monotone(flight, nested, rig):
    base = VisibilityConditions(pixel_noise_sigma=0.3)
    ref = simulate_observations(flight, nested, rig, base, 5)
    key = lambda log_: {(d.frame, d.camera, d.marker_id) for d in log_.detections}
    tighter = simulate_observations(flight, nested, rig, replace(base, range_max_ratio=15.0), 5)
    brighter_req = simulate_observations(flight, nested, rig, replace(base, min_illumination=7000.0), 5)
    dropped = simulate_observations(flight, nested, rig, replace(base, dropout_prob=0.3), 5)
    assert key(tighter) <= key(ref)
    assert key(brighter_req) <= key(ref) and not key(brighter_req)
    assert key(dropped) < key(ref)


def test_dropout_removes_whole_detections(flight, nested, rig):
    log_ = simulate_observations(flight, nested, rig, VisibilityConditions(dropout_prob=1.0), 0)
    assert log_.detections == []


def test_features_within_range(flight, rig, nested):
    cond = VisibilityConditions(pixel_noise_sigma=0.0)
    log_ = simulate_observations(flight, nested, rig, cond, 0, texture=GroundTexture())
    pts = GroundTexture().points()
    assert len(pts) == 50
    for o in log_.features[::50]:
        cam = rig[o.camera]
        pc = (flight.poses[o.frame] @ cam.extrinsic).inverse().act(pts[o.feature_id])
        assert 0 < np.linalg.norm(pc) <= cond.feature_max_range
        assert np.allclose(cam.project_points(pc[None])[0], o.pixel)


def test_no_texture_disables_features(flight, nested, rig):
    log_ = simulate_observations(flight, nested, rig, VisibilityConditions(), 0, texture=None)
    assert log_.features is None


def test_log_frame_bounds():
    with pytest.raises(ValueError):
        DetectionLog("h", 3, [Detection(0.0, 3, 0, 0, np.zeros((4, 2)))])
