import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from eventcalib.calibration import (
    CalibrationInfeasible,
    CalibrationSettings,
    ConditioningWarning,
    DegenerateGeometryError,
    InitializationError,
    calibrate,
    estimate_homography,
    estimate_pose,
    init_intrinsics,
    refine,
)
from eventcalib.camera import (
    Distortion,
    Intrinsics,
    UndistortError,
    ViewPose,
    distort,
    project_points,
    project_with_jacobian,
    rotation_angle_between,
    undistort,
)
from eventcalib.grid import GridDetection
from eventcalib.pattern import PatternSpec, pattern_object_points
from eventcalib.simulator import look_at_pose

K350 = Intrinsics(350.0, 350.0, 160.0, 120.0)


def _views(rng, spec, n, distance=(280.0, 380.0), tilt=0.5):
    return [
        look_at_pose(spec, rng.uniform(*distance), rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt), rng.uniform(-0.4, 0.4))
        for _ in range(n)
    ]


def _detections(spec, poses, intr, psi, noise=0.0, rng=None):
    obj = pattern_object_points(spec)
    dets = []
    for k, p in enumerate(poses):
        uv = project_points(obj, p.rvec, p.tvec, intr, psi)
        if noise:
            uv = uv + rng.normal(0.0, noise, uv.shape)
        dets.append(GridDetection(uv, 1000 * k, 0.0, 0, tuple(range(spec.M))))
    return dets


class TestPattern:
    def test_4x11_neighbour_spacing(self, spec_4x11):
        pts = pattern_object_points(spec_4x11)
        assert pts.shape == (44, 3) and np.all(pts[:, 2] == 0)
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
        np.fill_diagonal(d, np.inf)
        np.testing.assert_allclose(d.min(axis=1), 24.0, rtol=1e-12)

    def test_single_point(self):
        np.testing.assert_array_equal(pattern_object_points(PatternSpec(1, 1, 10.0)), [[0.0, 0.0, 0.0]])

    def test_3x7_geometry(self):
        spec = PatternSpec(3, 7, 34.0)
        pts = pattern_object_points(spec)
        assert len(pts) == 21
        # build the layout independently: columns 34/sqrt(2) apart, odd columns offset by the same amount
        s = 34.0 / math.sqrt(2.0)
        ref = [(c * s, (2 * r + c % 2) * s, 0.0) for c in range(7) for r in range(3)]
        np.testing.assert_allclose(pts, ref, atol=1e-12)
        assert np.ptp(pts[:, 0]) == pytest.approx(6 * s)
        assert np.ptp(pts[:, 1]) == pytest.approx(5 * s)


class TestHomography:
    def test_identity(self, rng):
        p = rng.uniform(-50, 50, (20, 2))
        np.testing.assert_allclose(estimate_homography(p, p), np.eye(3), atol=1e-12)

    def _apply(self, H, p):
        q = np.c_[p, np.ones(len(p))] @ H.T
        return q[:, :2] / q[:, 2:]

    def test_known_homography(self, rng):
        H = np.array([[1.2, 0.1, 30.0], [-0.05, 0.9, 12.0], [1e-3, -5e-4, 1.0]])
        p = rng.uniform(0, 200, (44, 2))
        He = estimate_homography(p, self._apply(H, p))
        assert np.max(np.abs(He / He[2, 2] - H) / np.abs(H)) < 1e-9

    def test_minimal_four_points(self):
        H = np.array([[0.8, -0.2, 5.0], [0.3, 1.1, -2.0], [2e-3, 1e-3, 1.0]])
        p = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]])
        np.testing.assert_allclose(estimate_homography(p, self._apply(H, p)), H, rtol=1e-10, atol=1e-12)

    def test_collinear_rejected(self):
        p = np.c_[np.arange(6.0), 2 * np.arange(6.0)]
        with pytest.raises(DegenerateGeometryError):
            estimate_homography(p, p + 1)

    def test_too_few(self):
        with pytest.raises(DegenerateGeometryError):
            estimate_homography(np.eye(3)[:, :2], np.eye(3)[:, :2])


class TestInitIntrinsics:
    def test_ten_noiseless_views(self, rng, spec_4x11):
        obj = pattern_object_points(spec_4x11)
        Hs = [
            estimate_homography(obj[:, :2], project_points(obj, p.rvec, p.tvec, K350, Distortion()))
            for p in _views(rng, spec_4x11, 10)
        ]
        K = init_intrinsics(Hs)
        np.testing.assert_allclose(K.as_array(), K350.as_array(), rtol=1e-6)

    def test_two_views_rejected(self, rng, spec_4x11):
        with pytest.raises(InitializationError, match="at least 3"):
            init_intrinsics([np.eye(3), np.eye(3)])


class TestDistortion:
    def test_zero_is_identity(self, rng):
        p = rng.normal(0, 0.4, (50, 2))
        np.testing.assert_array_equal(distort(p, Distortion()), p)
        np.testing.assert_array_equal(undistort(p, Distortion()), p)

    def test_origin_fixed(self, true_distortion):
        np.testing.assert_array_equal(distort([0.0, 0.0], true_distortion), [0.0, 0.0])

    def test_k1_example_exact(self, true_distortion):
        # exact rational evaluation of the polynomial
        k1, k2, k3, p1, p2 = (Fraction(v) for v in true_distortion.as_array())
        x, y = Fraction(1, 2), Fraction(0)
        r2 = x * x + y * y
        rad = 1 + k1 * r2 + k2 * r2**2 + k3 * r2**3
        xd = x * rad + 2 * p1 * x * y + p2 * (r2 + 2 * x * x)
        yd = y * rad + p1 * (r2 + 2 * y * y) + 2 * p2 * x * y
        np.testing.assert_allclose(distort([0.5, 0.0], true_distortion), [float(xd), float(yd)], rtol=1e-15, atol=1e-17)
        assert distort([0.5, 0.0], Distortion(k1=-0.34))[0] == pytest.approx(0.5 * (1 - 0.34 * 0.25), rel=1e-15)

    def test_round_trip(self, rng, true_distortion):
        p = rng.uniform(-0.5, 0.5, (1000, 2))
        assert np.abs(distort(undistort(p, true_distortion), true_distortion) - p).max() < 1e-10
        assert np.abs(undistort(distort(p, true_distortion), true_distortion) - p).max() < 1e-10

    def test_beyond_turning_point(self):
        # k1-only model: r_d = r (1 + k1 r^2) peaks at r = 1/sqrt(-3 k1)
        k1 = -0.34
        r_peak = 1.0 / math.sqrt(-3.0 * k1)
        rd_max = r_peak * (1 + k1 * r_peak**2)
        with pytest.raises(UndistortError):
            undistort([[1.05 * rd_max, 0.0]], Distortion(k1=k1))


class TestProjection:
    def test_pinhole_identity_pose(self):
        pts = np.array([[10.0, -5.0, 100.0], [0.0, 0.0, 50.0], [-30.0, 20.0, 400.0]])
        uv = project_points(pts, np.zeros(3), np.zeros(3), K350, Distortion())
        np.testing.assert_allclose(uv[:, 0], 350 * pts[:, 0] / pts[:, 2] + 160)
        np.testing.assert_allclose(uv[:, 1], 350 * pts[:, 1] / pts[:, 2] + 120)

    @pytest.mark.parametrize("pixel_units", [False, True])
    def test_jacobian_finite_differences(self, rng, spec_4x11, pixel_units):
        obj = pattern_object_points(spec_4x11)
        psi = np.array([-0.3, 0.1, -0.02, 1e-3, -5e-4]) if not pixel_units else np.array([-3e-6, 1e-11, 0.0, 1e-6, -1e-6])
        for pose in _views(rng, spec_4x11, 5):
            x = np.r_[350.0, 352.0, 160.0, 120.0, psi, pose.rvec, pose.tvec]
            _, J = project_with_jacobian(obj, x[9:12], x[12:], x[:4], x[4:9], pixel_units)
            for j in range(15):
                h = 1e-6 * max(1.0, abs(x[j]))
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                fd = (
                    project_points(obj, xp[9:12], xp[12:], xp[:4], xp[4:9], pixel_units)
                    - project_points(obj, xm[9:12], xm[12:], xm[:4], xm[4:9], pixel_units)
                ) / (2 * h)
                np.testing.assert_allclose(J[:, :, j], fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max() + 1e-9)


class TestEstimatePose:
    def test_noiseless(self, rng, spec_4x11, true_intrinsics, true_distortion):
        obj = pattern_object_points(spec_4x11)
        for pose in _views(rng, spec_4x11, 5):
            uv = project_points(obj, pose.rvec, pose.tvec, true_intrinsics, true_distortion)
            est = estimate_pose(obj, uv, true_intrinsics, true_distortion)
            assert rotation_angle_between(est.R, pose.R) < 1e-6
            assert np.abs(est.tvec - pose.tvec).max() < 1e-4

    def test_fronto_parallel_depth(self, spec_4x11):
        obj = pattern_object_points(spec_4x11)
        pose = ViewPose.from_arrays(np.zeros(3), [-100.0, -60.0, 300.0])
        uv = project_points(obj, pose.rvec, pose.tvec, K350, Distortion())
        assert estimate_pose(obj, uv, K350).tvec[2] == pytest.approx(300.0, abs=1e-6)

    def test_too_few_points(self, spec_4x11):
        with pytest.raises(DegenerateGeometryError):
            estimate_pose(np.zeros((3, 3)), np.zeros((3, 2)), K350)


class TestRefine:
    def test_noiseless_recovery(self, rng, spec_4x11, true_intrinsics, true_distortion):
        poses = _views(rng, spec_4x11, 20)
        dets = _detections(spec_4x11, poses, true_intrinsics, true_distortion)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConditioningWarning)
            rep = calibrate(dets, spec_4x11)
        np.testing.assert_allclose(rep.intrinsics.as_array()[:2], [350.0, 352.0], rtol=1e-6)
        np.testing.assert_allclose(rep.distortion.as_array(), true_distortion.as_array(), atol=1e-8)
        assert rep.rms < 1e-8
        assert rep.N == 20 and rep.residuals.shape == (20, 44, 2)

    def test_point_noise_forty_views(self, rng, spec_4x11, true_intrinsics, true_distortion):
        # 0.1 px per point (Euclidean), i.e. 0.1/sqrt(2) per coordinate
        poses = _views(rng, spec_4x11, 40)
        dets = _detections(spec_4x11, poses, true_intrinsics, true_distortion, 0.1 / math.sqrt(2), rng)
        rep = calibrate(dets, spec_4x11)
        assert abs(rep.intrinsics.fx - 350.0) / 350.0 < 5e-3
        assert abs(rep.intrinsics.fy - 352.0) / 352.0 < 5e-3
        assert rep.rms == pytest.approx(0.1, rel=0.1)
        assert rep.rms == pytest.approx(np.sqrt(np.mean(rep.per_view_rms**2)), rel=1e-12)

    def test_tangential_toggle(self, rng, spec_4x11, true_intrinsics):
        psi = Distortion(-0.34, 0.12, -0.02)
        dets = _detections(spec_4x11, _views(rng, spec_4x11, 25), true_intrinsics, psi, 0.05, rng)
        rep = calibrate(dets, spec_4x11, CalibrationSettings(tangential=False))
        assert rep.distortion.p1 == 0.0 and rep.distortion.p2 == 0.0
        assert rep.distortion.k1 == pytest.approx(-0.34, abs=0.02)

    def test_never_worse_than_start(self, rng, spec_4x11, true_intrinsics, true_distortion):
        poses = _views(rng, spec_4x11, 20)
        dets = _detections(spec_4x11, poses, true_intrinsics, true_distortion, 0.2, rng)
        obj = pattern_object_points(spec_4x11)
        K0 = Intrinsics(340.0, 340.0, 165.0, 118.0)
        init = [estimate_pose(obj, d.points, K0) for d in dets]
        start = np.sqrt(np.mean([np.sum((project_points(obj, p.rvec, p.tvec, K0, Distortion()) - d.points) ** 2, axis=1) for p, d in zip(init, dets)]))
        rep = refine(dets, spec_4x11, K0, Distortion(), init)
        assert rep.rms <= start

    def test_pattern_scale_invariance(self, rng, spec_4x11, true_intrinsics, true_distortion):
        poses = _views(rng, spec_4x11, 20)
        dets = _detections(spec_4x11, poses, true_intrinsics, true_distortion, 0.1, rng)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConditioningWarning)
            a = calibrate(dets, spec_4x11)
            b = calibrate(dets, spec_4x11.scaled(2.5))
        np.testing.assert_allclose(b.intrinsics.as_array(), a.intrinsics.as_array(), rtol=1e-6)
        np.testing.assert_allclose(b.distortion.as_array(), a.distortion.as_array(), atol=1e-6)
        assert b.rms == pytest.approx(a.rms, rel=1e-6)
        for pa, pb in zip(a.poses, b.poses):
            np.testing.assert_allclose(pb.tvec, 2.5 * pa.tvec, rtol=1e-5)

    def test_fronto_parallel_warning(self, spec_4x11, true_intrinsics):
        poses = [ViewPose.from_arrays([0.0, 0.0, 0.05 * k], [-100.0 + k, -60.0, 300.0 + 5 * k]) for k in range(5)]
        dets = _detections(spec_4x11, poses, true_intrinsics, Distortion())
        with pytest.warns(ConditioningWarning):
            refine(dets, spec_4x11, true_intrinsics, Distortion(), poses)

    def test_too_few_views(self, rng, spec_4x11, true_intrinsics):
        dets = _detections(spec_4x11, _views(rng, spec_4x11, 5), true_intrinsics, Distortion())
        with pytest.raises(CalibrationInfeasible):
            calibrate(dets, spec_4x11)

    def test_view_timestamps_kept(self, rng, spec_4x11, true_intrinsics):
        dets = _detections(spec_4x11, _views(rng, spec_4x11, 22), true_intrinsics, Distortion())
        with pytest.warns(ConditioningWarning, match="only 11 views"):
            rep = calibrate(dets, spec_4x11, CalibrationSettings(thin=2))
        assert rep.view_t_ref == [d.window_t_ref for d in dets[::2]]
