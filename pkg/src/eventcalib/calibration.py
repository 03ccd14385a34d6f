"""Intrinsic and extrinsic calibration from ordered grid detections.

Closed-form start (normalized DLT homographies, then the absolute-conic
constraints of each view for K), per-view planar pose, and a joint LM bundle
over [fx, fy, u0, v0, k1, k2, k3, p1, p2] plus six pose parameters per view.
Residuals are observed minus projected centers in distorted pixel space.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .camera import (
    Distortion,
    Intrinsics,
    ViewPose,
    project_points,
    project_with_jacobian,
    rotvec_from_matrix,
    undistort,
)
from .grid import GridDetection
from .nlls import LMDivergedError, LMProblem, LMSettings, solve
from .pattern import PatternSpec, pattern_object_points

log = logging.getLogger(__name__)

N_INTRINSIC = 9
MIN_VIEWS = 10
WARN_VIEWS = 20


class CalibrationError(RuntimeError):
    pass


class DegenerateGeometryError(CalibrationError):
    pass


class InitializationError(CalibrationError):
    pass


class CalibrationInfeasible(CalibrationError):
    """Too few usable views; ``stats`` carries whatever the caller attached."""

    def __init__(self, message: str, stats=None):
        super().__init__(message)
        self.stats = stats


class CalibrationDiverged(CalibrationError):
    def __init__(self, message: str, params: Optional[np.ndarray] = None):
        super().__init__(message)
        self.params = params


class ConditioningWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CalibrationSettings:
    tangential: bool = True
    pixel_units: bool = False
    min_views: int = MIN_VIEWS
    thin: int = 1
    lm: LMSettings = LMSettings(max_iters=100, tol_step=1e-12, tol_cost=1e-14)


@dataclass
class CalibrationReport:
    intrinsics: Intrinsics
    distortion: Distortion
    poses: list[ViewPose]
    residuals: np.ndarray  # (N, M, 2) observed minus projected, pixels
    view_t_ref: list[int] = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    settings: CalibrationSettings = field(default_factory=CalibrationSettings)

    @property
    def N(self) -> int:
        return len(self.poses)

    @property
    def per_view_rms(self) -> np.ndarray:
        return np.sqrt(np.mean(np.sum(self.residuals**2, axis=2), axis=1))

    @property
    def rms(self) -> float:
        """Global per-point Euclidean RMS reprojection error (zeta_r)."""
        if self.residuals.size == 0:
            return float("nan")
        return float(np.sqrt(np.mean(np.sum(self.residuals**2, axis=2))))


# ---------------------------------------------------------------- homography


def _hartley(p: np.ndarray) -> np.ndarray:
    c = p.mean(axis=0)
    d = np.sqrt(np.sum((p - c) ** 2, axis=1)).mean()
    if not d > 0:
        raise DegenerateGeometryError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def estimate_homography(object_points_2d, image_points) -> np.ndarray:
    """Normalized DLT homography mapping pattern-plane points to image points."""
    src = np.asarray(object_points_2d, dtype=float)[:, :2]
    dst = np.asarray(image_points, dtype=float)[:, :2]
    n = len(src)
    if n < 4 or len(dst) != n:
        raise DegenerateGeometryError("need at least four correspondences")
    Ts, Td = _hartley(src), _hartley(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    for pts in (s, d):
        sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
        if sv[1] < 1e-9 * max(sv[0], 1e-300):
            raise DegenerateGeometryError("correspondences are collinear")
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = s
    A[0::2, 2] = 1.0
    A[0::2, 6:8] = -d[:, :1] * s
    A[0::2, 8] = -d[:, 0]
    A[1::2, 3:5] = s
    A[1::2, 5] = 1.0
    A[1::2, 6:8] = -d[:, 1:] * s
    A[1::2, 8] = -d[:, 1]
    _, sv, vt = np.linalg.svd(A)
    if n > 4 and sv[-2] < 1e-12 * sv[0]:
        raise DegenerateGeometryError("homography is not unique")
    Hn = vt[-1].reshape(3, 3)
    H = np.linalg.solve(Td, Hn @ Ts)
    if abs(H[2, 2]) > 1e-12 * np.abs(H).max():
        H = H / H[2, 2]
    else:
        H = H / np.linalg.norm(H)
    return H


# ---------------------------------------------------------------- intrinsics


def _v(H: np.ndarray, i: int, j: int) -> np.ndarray:
    hi, hj = H[:, i], H[:, j]
    return np.array(
        [
            hi[0] * hj[0],
            hi[0] * hj[1] + hi[1] * hj[0],
            hi[1] * hj[1],
            hi[2] * hj[0] + hi[0] * hj[2],
            hi[2] * hj[1] + hi[1] * hj[2],
            hi[2] * hj[2],
        ]
    )


def init_intrinsics(homographies: Sequence[np.ndarray], image_scale: float | None = None) -> Intrinsics:
    """Closed-form zero-skew K from three or more plane homographies.

    Homographies are re-expressed in a scaled pixel frame before solving so
    the conic coefficients are of comparable size.
    """
    Hs = [np.asarray(H, dtype=float) for H in homographies]
    if len(Hs) < 3:
        raise InitializationError(f"{len(Hs)} views are not enough to initialize intrinsics; use at least 3")
    if image_scale is None:
        image_scale = float(np.median([abs(H[0, 2] / H[2, 2]) + abs(H[1, 2] / H[2, 2]) for H in Hs])) or 1.0
    N = np.diag([1.0 / image_scale, 1.0 / image_scale, 1.0])
    rows = []
    for H in Hs:
        Hn = N @ H
        Hn = Hn / np.linalg.norm(Hn)
        rows.append(_v(Hn, 0, 1))
        rows.append(_v(Hn, 0, 0) - _v(Hn, 1, 1))
    rows.append(np.array([0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))  # zero skew
    V = np.array(rows)
    _, sv, vt = np.linalg.svd(V)
    if sv[-2] < 1e-10 * sv[0]:
        raise InitializationError("view orientations are degenerate; add views with different tilts")
    b = vt[-1]
    B11, B12, B22, B13, B23, B33 = b
    den = B11 * B22 - B12 * B12
    if abs(den) < 1e-300 or abs(B11) < 1e-300:
        raise InitializationError("degenerate absolute conic")
    v0 = (B12 * B13 - B11 * B23) / den
    lam = B33 - (B13 * B13 + v0 * (B12 * B13 - B11 * B23)) / B11
    if lam / B11 <= 0 or lam * B11 / den <= 0:
        raise InitializationError("absolute conic is not positive definite; add views with different tilts")
    fx = math.sqrt(lam / B11)
    fy = math.sqrt(lam * B11 / den)
    u0 = -B13 * fx * fx / lam
    Kn = np.array([[fx, 0.0, u0], [0.0, fy, v0], [0.0, 0.0, 1.0]])
    return Intrinsics.from_K(np.linalg.solve(N, Kn))


# ---------------------------------------------------------------- pose


def _normalized_points(image_points, intr: Intrinsics, psi, pixel_units: bool = False) -> np.ndarray:
    uv = np.asarray(image_points, dtype=float)
    psi = psi.as_array() if isinstance(psi, Distortion) else np.asarray(psi, dtype=float)
    if pixel_units:
        off = undistort(uv - [intr.u0, intr.v0], psi)
        return off / [intr.fx, intr.fy]
    xy = (uv - [intr.u0, intr.v0]) / [intr.fx, intr.fy]
    return undistort(xy, psi) if np.any(psi) else xy


def pose_from_homography(H_norm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation vector and translation from a pattern-to-normalized-image homography."""
    h1, h2, h3 = H_norm[:, 0], H_norm[:, 1], H_norm[:, 2]
    lam = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * lam < 0:
        lam = -lam
    r1, r2, t = lam * h1, lam * h2, lam * h3
    Rm = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(Rm)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1.0, 1.0, -1.0]) @ Vt
    return rotvec_from_matrix(R), t


def estimate_pose(
    object_points,
    image_points,
    intr: Intrinsics,
    psi=Distortion(),
    pixel_units: bool = False,
    settings: LMSettings = LMSettings(max_iters=50, tol_step=1e-12, tol_cost=1e-15),
) -> ViewPose:
    """Planar pose from the view homography, refined by LM on reprojection error."""
    obj = np.asarray(object_points, dtype=float)
    img = np.asarray(image_points, dtype=float)
    if len(obj) < 4:
        raise DegenerateGeometryError("need at least four correspondences for a pose")
    xy = _normalized_points(img, intr, psi, pixel_units)
    H = estimate_homography(obj[:, :2], xy)
    w0, t0 = pose_from_homography(H)
    kpar = intr.as_array()
    psi_a = psi.as_array() if isinstance(psi, Distortion) else np.asarray(psi, dtype=float)

    def rj(p):
        uv, J = project_with_jacobian(obj, p[:3], p[3:], kpar, psi_a, pixel_units)
        return (uv - img).ravel(), J[:, :, 9:].reshape(-1, 6)

    def res(p):
        return (project_points(obj, p[:3], p[3:], kpar, psi_a, pixel_units) - img).ravel()

    try:
        out = solve(LMProblem(res, residual_and_jacobian_fn=rj), np.r_[w0, t0], settings)
    except LMDivergedError as exc:
        raise DegenerateGeometryError(f"pose refinement failed: {exc}") from exc
    return ViewPose.from_arrays(out.params[:3], out.params[3:])


# ---------------------------------------------------------------- bundle


def _tilt_deg(pose: ViewPose) -> float:
    n = pose.R[:, 2]
    return math.degrees(math.acos(min(1.0, abs(n[2]))))


def refine(
    detections: Sequence[GridDetection] | Sequence[np.ndarray],
    spec: PatternSpec,
    init_intrinsics: Intrinsics,
    init_distortion: Distortion,
    init_poses: Sequence[ViewPose],
    settings: CalibrationSettings = CalibrationSettings(),
) -> CalibrationReport:
    """Joint LM over intrinsics, distortion and every view pose."""
    obs = [np.asarray(getattr(d, "points", d), dtype=float) for d in detections]
    N = len(obs)
    if N < 3:
        raise CalibrationInfeasible(f"{N} views cannot constrain the bundle; need at least 3")
    if len(init_poses) != N:
        raise ValueError("one initial pose per detection is required")
    M = spec.M
    obj = pattern_object_points(spec)
    img = np.stack(obs)
    if img.shape != (N, M, 2):
        raise ValueError(f"detections must be ({M}, 2) point arrays")
    if max(_tilt_deg(p) for p in init_poses) < 10.0:
        warnings.warn("all views are nearly fronto-parallel; focal length is poorly conditioned", ConditioningWarning)

    free = np.ones(N_INTRINSIC, dtype=bool)
    if not settings.tangential:
        free[7:9] = False
    free_idx = np.flatnonzero(free)
    nf = len(free_idx)
    base = np.r_[init_intrinsics.as_array(), init_distortion.as_array()]
    if not settings.tangential:
        base[7:9] = 0.0
    x0 = np.r_[base[free_idx], np.concatenate([np.r_[p.rvec, p.tvec] for p in init_poses])]

    def unpack(x):
        intr = base.copy()
        intr[free_idx] = x[:nf]
        return intr, x[nf:].reshape(N, 6)

    def rj(x):
        intr, poses = unpack(x)
        r = np.empty((N, M, 2))
        J = np.zeros((N, M, 2, nf + 6 * N))
        for v in range(N):
            uv, Jv = project_with_jacobian(obj, poses[v, :3], poses[v, 3:], intr[:4], intr[4:], settings.pixel_units)
            r[v] = uv - img[v]
            J[v, :, :, :nf] = Jv[:, :, free_idx]
            J[v, :, :, nf + 6 * v : nf + 6 * v + 6] = Jv[:, :, 9:]
        return r.ravel(), J.reshape(N * M * 2, -1)

    def res(x):
        intr, poses = unpack(x)
        out = np.empty((N, M, 2))
        for v in range(N):
            out[v] = project_points(obj, poses[v, :3], poses[v, 3:], intr[:4], intr[4:], settings.pixel_units) - img[v]
        return out.ravel()

    try:
        result = solve(LMProblem(res, residual_and_jacobian_fn=rj), x0, settings.lm)
    except LMDivergedError as exc:
        raise CalibrationDiverged(f"bundle adjustment diverged: {exc}", exc.params) from exc
    intr, poses = unpack(result.params)
    if not np.all(np.isfinite(intr)) or intr[0] <= 0 or intr[1] <= 0:
        raise CalibrationDiverged("bundle adjustment produced invalid intrinsics", result.params)
    residuals = -res(result.params).reshape(N, M, 2)
    return CalibrationReport(
        intrinsics=Intrinsics(*map(float, intr[:4])),
        distortion=Distortion.from_array(intr[4:]),
        poses=[ViewPose.from_arrays(p[:3], p[3:]) for p in poses],
        residuals=residuals,
        view_t_ref=[int(getattr(d, "window_t_ref", 0)) for d in detections],
        iterations=result.iterations,
        converged=result.converged,
        settings=settings,
    )


def calibrate(
    detections: Sequence[GridDetection],
    spec: PatternSpec,
    settings: CalibrationSettings = CalibrationSettings(),
) -> CalibrationReport:
    """Full calibration: homographies, closed-form K, poses, joint refinement."""
    dets = list(detections)[:: max(1, settings.thin)]
    N = len(dets)
    if N < settings.min_views:
        raise CalibrationInfeasible(f"{N} usable views; at least {settings.min_views} are required")
    if N < WARN_VIEWS:
        warnings.warn(f"only {N} views; {WARN_VIEWS} or more give a better-conditioned calibration", ConditioningWarning)
    obj = pattern_object_points(spec)
    Hs = [estimate_homography(obj[:, :2], d.points) for d in dets]
    K0 = init_intrinsics(Hs)
    psi0 = Distortion()
    poses0 = [estimate_pose(obj, d.points, K0, psi0) for d in dets]
    log.debug("initial K %s", K0)
    return refine(dets, spec, K0, psi0, poses0, settings)
