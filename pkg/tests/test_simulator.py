import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from eventcalib.camera import Distortion, Intrinsics, ViewPose, distort, project_points
from eventcalib.cylinder import fit_cluster
from eventcalib.events import DAVIS346, build_windows, ingest_events, normalize, write_events
from eventcalib.pattern import PatternSpec, pattern_object_points
from eventcalib.simulator import (
    CLUTTER,
    OUTLIER,
    GroundTruth,
    NoiseModel,
    Trajectory,
    emit_ground_truth_centers,
    look_at_pose,
    simulate,
)

K = Intrinsics(350.0, 352.0, 160.0, 120.0)
CLEAN = NoiseModel(center_jitter_sigma=0.0, outlier_fraction=0.0, seed=1)
SPEC = PatternSpec(4, 11, 24.0)


def _static(pose, duration=200_000):
    return Trajectory((0, duration), (pose, pose))


def _lateral(dx_mm=30.0, duration=400_000, depth=330.0):
    p0 = look_at_pose(SPEC, depth, 0, 0, 0, offset=(-dx_mm / 2, 0.0))
    p1 = look_at_pose(SPEC, depth, 0, 0, 0, offset=(dx_mm / 2, 0.0))
    return Trajectory((0, duration), (p0, p1))


def test_static_events_lie_on_projected_rims():
    pose = look_at_pose(SPEC, 320, 0.25, -0.15, 0.1)
    ev, gt = simulate(K, Distortion(-0.34, 0.12), SPEC, _static(pose, 66_000), CLEAN)
    obj = pattern_object_points(SPEC)
    th = np.linspace(0, 2 * np.pi, 4000, endpoint=False)
    ring = np.column_stack([np.cos(th), np.sin(th), np.zeros_like(th)]) * 0.2 * SPEC.diagonal_spacing
    xy = np.column_stack([ev.x, ev.y]).astype(float)
    for c in range(SPEC.M):
        rim = project_points(obj[c] + ring, pose.rvec, pose.tvec, K, Distortion(-0.34, 0.12))
        pts = xy[gt.labels == c]
        # the rim passes through the pixel square of every event
        linf, _ = cKDTree(rim).query(pts, p=np.inf)
        assert linf.max() <= 0.5 + 0.01


def test_static_clusters_are_untilted():
    pose = look_at_pose(SPEC, 320, 0.1, 0.1, 0.0)
    ev, gt = simulate(K, Distortion(), SPEC, _static(pose), CLEAN)
    t = ev.t.astype(float)
    for c in range(SPEC.M):
        m = gt.labels == c
        for coord in (ev.x[m], ev.y[m]):
            slope = np.polyfit(t[m] / 33_000, coord.astype(float), 1)[0]
            assert abs(slope) < 0.05  # px per window step


def test_lateral_motion_tilt_matches_image_velocity():
    # a low rate stretches each window over a whole step, so the rim moves several pixels
    ev, gt = simulate(K, Distortion(), SPEC, _lateral(), NoiseModel(0.0, 6.0, 0.0, seed=1), min_events=8000)
    # fronto-parallel translation: du/dt = fx * vx / Z
    vx = 30.0 / 400_000
    expected = K.fx * vx / 330.0 * 33_000  # px per step
    slopes = []
    for w in build_windows(ev, 8000, 33_000)[:4]:
        ne = normalize(w, DAVIS346, 33_000)
        lab = gt.labels[w.start : w.stop]
        for c in range(SPEC.M):
            p = fit_cluster(ne.xyt[lab == c], 346, 260).params
            # cylinder axis direction in (x, y, t): dx/dt = -tan(alpha)
            slopes.append(-math.tan(p.alpha) * 346)
    assert np.median(slopes) == pytest.approx(expected, rel=0.03)


def test_deterministic_files(tmp_path):
    traj = _lateral(duration=100_000)
    files = []
    for k in range(2):
        ev, gt = simulate(K, Distortion(-0.3), SPEC, traj, NoiseModel(seed=7, background_clutter_rate=1.0))
        path = tmp_path / f"run{k}.csv"
        write_events(path, ev)
        gt.save(tmp_path / f"run{k}.json")
        files.append(path)
    assert files[0].read_bytes() == files[1].read_bytes()
    assert (tmp_path / "run0.labels.npy").read_bytes() == (tmp_path / "run1.labels.npy").read_bytes()
    other, _ = simulate(K, Distortion(-0.3), SPEC, traj, NoiseModel(seed=8))
    assert not np.array_equal(other.x, ingest_events(files[0], DAVIS346).x)


def test_truth_centres_are_pinhole_projections():
    pose = ViewPose.from_arrays(np.zeros(3), [-120.0, -60.0, 300.0])
    _, gt = simulate(K, Distortion(), SPEC, _static(pose, 100_000), CLEAN)
    obj = pattern_object_points(SPEC)
    u = 350.0 * (obj[:, 0] - 120.0) / 300.0 + 160.0
    v = 352.0 * (obj[:, 1] - 60.0) / 300.0 + 120.0
    centres = emit_ground_truth_centers(gt)
    assert centres
    for c in centres.values():
        np.testing.assert_allclose(c, np.column_stack([u, v]), atol=1e-9)


def test_truth_centres_with_distortion():
    psi = Distortion(-0.34, 0.12, -0.02, -0.0006, -0.0005)
    pose = look_at_pose(SPEC, 310, 0.2, 0.1, 0.05)
    _, gt = simulate(K, psi, SPEC, _static(pose, 100_000), CLEAN)
    Xc = pattern_object_points(SPEC) @ pose.R.T + pose.tvec
    xd = distort(Xc[:, :2] / Xc[:, 2:], psi)
    expected = xd * [K.fx, K.fy] + [K.u0, K.v0]
    for w in gt.windows:
        np.testing.assert_allclose(w.centers, expected, atol=1e-9)


def test_fitted_centres_agree_on_clean_data():
    # Zero jitter and no outliers. Pixel rounding is the only noise; it averages out
    # when the rims sweep across pixels in both directions during a window, and
    # 16k-event windows spanning a full step give each circle ~360 events.
    psi = Distortion(-0.34, 0.12, -0.02, -0.0006, -0.0005)
    traj = Trajectory((0, 300_000), (look_at_pose(SPEC, 330, 0, 0, 0, (-12, -9)), look_at_pose(SPEC, 330, 0, 0, 0, (12, 9))))
    ev, gt = simulate(K, psi, SPEC, traj, NoiseModel(0.0, 12.0, 0.0, seed=1), min_events=16_000)
    errs = []
    for w, truth in zip(build_windows(ev, 16_000, 33_000), gt.windows):
        ne = normalize(w, DAVIS346, 33_000)
        lab = gt.labels[w.start : w.stop]
        for c in range(SPEC.M):
            f = fit_cluster(ne.xyt[lab == c], 346, 260)
            errs.append(np.hypot(*(np.asarray(f.center) - truth.centers[c])))
    assert np.mean(errs) < 0.1


def test_event_count_linear_in_rate():
    pose = look_at_pose(SPEC, 320, 0.1, 0.2, 0.0)
    n = []
    for rate in (20.0, 40.0, 80.0):
        ev, gt = simulate(K, Distortion(), SPEC, _static(pose, 99_000), NoiseModel(0.0, rate, 0.0, seed=2))
        n.append(len(ev))
    steps = 3
    assert abs(n[1] - 2 * n[0]) <= SPEC.M * steps
    assert abs(n[2] - 2 * n[1]) <= SPEC.M * steps


def test_labels_partition_events():
    ev, gt = simulate(K, Distortion(), SPEC, _lateral(duration=132_000), NoiseModel(seed=3, background_clutter_rate=2.0))
    assert len(gt.labels) == len(ev)
    kinds = set(np.unique(gt.labels))
    assert kinds <= set(range(SPEC.M)) | {OUTLIER, CLUTTER}
    assert {OUTLIER, CLUTTER} <= kinds and set(range(SPEC.M)) <= kinds


def test_sidecar_round_trip(tmp_path):
    ev, gt = simulate(K, Distortion(-0.2), SPEC, _lateral(duration=132_000), NoiseModel(seed=4))
    gt.save(tmp_path / "truth.json")
    back = GroundTruth.load(tmp_path / "truth.json")
    assert back.intrinsics == gt.intrinsics and back.distortion == gt.distortion and back.noise == gt.noise
    np.testing.assert_array_equal(back.labels, gt.labels)
    assert [w.t1 for w in back.windows] == [w.t1 for w in gt.windows]
    for a, b in zip(back.windows, gt.windows):
        np.testing.assert_allclose(a.centers, b.centers, atol=1e-8)
        np.testing.assert_allclose(a.pose.tvec, b.pose.tvec, rtol=1e-15)


def test_out_of_frame_windows_flagged():
    inside = look_at_pose(SPEC, 330, 0, 0, 0)
    outside = look_at_pose(SPEC, 330, 0, 0, 0, offset=(400.0, 0.0))
    ev, gt = simulate(K, Distortion(), SPEC, Trajectory((0, 330_000), (inside, outside)), CLEAN, min_events=2000)
    flags = [w.visible for w in gt.windows]
    assert flags[0] and not all(flags)
    assert set(emit_ground_truth_centers(gt)) == {w.index for w in gt.windows if w.visible}


def test_invalid_inputs():
    with pytest.raises(ValueError):
        NoiseModel(outlier_fraction=1.0)
    with pytest.raises(ValueError):
        Trajectory((0, 0), (look_at_pose(SPEC, 300, 0, 0, 0),) * 2)
    with pytest.raises(ValueError):
        simulate(K, Distortion(), SPEC, _lateral(), CLEAN, circle_radius=20.0)
