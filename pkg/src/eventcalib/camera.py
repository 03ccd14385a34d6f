"""Pinhole camera with Brown-Conrady radial/tangential distortion.

Forward model (pattern point -> pixel):
    X_c = R(omega) X + t
    (x, y) = (X_c / Z_c, Y_c / Z_c)
    (x_d, y_d) = distort(x, y)
    u = fx x_d + u0,  v = fy y_d + v0

Distortion is applied in focal-normalized coordinates by default. Setting
``pixel_units=True`` applies the same polynomial to pixel offsets from the
principal point instead; coefficient magnitudes are then not comparable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UndistortError(ValueError):
    """Raised when the distortion map cannot be inverted at a point."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    u0: float
    v0: float

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.u0], [0.0, self.fy, self.v0], [0.0, 0.0, 1.0]])

    @classmethod
    def from_K(cls, K) -> "Intrinsics":
        K = np.asarray(K, dtype=float)
        return cls(float(K[0, 0]), float(K[1, 1]), float(K[0, 2]), float(K[1, 2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.u0, self.v0])


@dataclass(frozen=True)
class Distortion:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError("distortion coefficients must be finite")

    def as_array(self) -> np.ndarray:
        """Coefficients in (k1, k2, k3, p1, p2) order."""
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2], dtype=float)

    @classmethod
    def from_array(cls, a) -> "Distortion":
        a = np.asarray(a, dtype=float)
        return cls(*map(float, a[:5]))

    def is_sane(self) -> bool:
        return all(abs(k) < 10 for k in (self.k1, self.k2, self.k3)) and all(abs(p) < 1 for p in (self.p1, self.p2))


@dataclass(frozen=True)
class ViewPose:
    """Pattern-to-camera transform: axis-angle rotation (rad) and translation (mm)."""

    rotation: tuple[float, float, float]
    translation: tuple[float, float, float]

    @classmethod
    def from_arrays(cls, rvec, tvec) -> "ViewPose":
        rvec = wrap_rotvec(np.asarray(rvec, dtype=float))
        return cls(tuple(map(float, rvec)), tuple(map(float, np.asarray(tvec, dtype=float))))

    @property
    def rvec(self) -> np.ndarray:
        return np.array(self.rotation)

    @property
    def tvec(self) -> np.ndarray:
        return np.array(self.translation)

    @property
    def R(self) -> np.ndarray:
        return rodrigues(self.rvec)


# --------------------------------------------------------------------------- rotations


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(rvec) -> np.ndarray:
    w = np.asarray(rvec, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def rotvec_from_matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    if theta < 1e-8:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi: axis from the dominant column of (R + I) / 2
        B = (R + np.eye(3)) / 2.0
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(B[i, i])
        return axis / np.linalg.norm(axis) * theta
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / (2.0 * np.sin(theta))
    return axis * theta


def wrap_rotvec(rvec: np.ndarray) -> np.ndarray:
    """Return the equivalent rotation vector with angle in [0, pi]."""
    theta = float(np.linalg.norm(rvec))
    if theta <= np.pi:
        return rvec
    axis = rvec / theta
    theta = np.mod(theta, 2.0 * np.pi)
    if theta > np.pi:
        theta = 2.0 * np.pi - theta
        axis = -axis
    return axis * theta


def rotation_right_jacobian(rvec) -> np.ndarray:
    """J_r with d(R(w) X)/dw = -R(w) [X]_x J_r(w)."""
    w = np.asarray(rvec, dtype=float)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * W + W @ W / 6.0
    return (
        np.eye(3)
        - (1.0 - np.cos(theta)) / theta**2 * W
        + (theta - np.sin(theta)) / theta**3 * W @ W
    )


def rotation_angle_between(R_a, R_b) -> float:
    """Geodesic angle (rad) between two rotation matrices."""
    R = np.asarray(R_a).T @ np.asarray(R_b)
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


# --------------------------------------------------------------------------- distortion


def _distort_xy(x, y, psi):
    k1, k2, k3, p1, p2 = psi
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return xd, yd


def distort(points, psi: Distortion | np.ndarray) -> np.ndarray:
    """Map ideal (undistorted) coordinates to distorted coordinates.

    ``points`` is (..., 2). Coordinates are centered on the principal point
    (focal-normalized in the default convention).
    """
    psi = psi.as_array() if isinstance(psi, Distortion) else np.asarray(psi, dtype=float)
    p = np.asarray(points, dtype=float)
    xd, yd = _distort_xy(p[..., 0], p[..., 1], psi)
    return np.stack([xd, yd], axis=-1)


def distort_jacobians(x, y, psi):
    """Distorted coordinates with partials w.r.t. (x, y) and the coefficients.

    Returns xd, yd, dxy (n, 2, 2) and dpsi (n, 2, 5) in (k1, k2, k3, p1, p2) order.
    """
    k1, k2, k3, p1, p2 = psi
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    dradial_dr2 = k1 + r2 * (2.0 * k2 + 3.0 * k3 * r2)
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y

    n = np.shape(x)[0]
    dxy = np.empty((n, 2, 2))
    dxy[:, 0, 0] = radial + x * dradial_dr2 * 2.0 * x + 2.0 * p1 * y + p2 * 6.0 * x
    dxy[:, 0, 1] = x * dradial_dr2 * 2.0 * y + 2.0 * p1 * x + p2 * 2.0 * y
    dxy[:, 1, 0] = y * dradial_dr2 * 2.0 * x + p1 * 2.0 * x + 2.0 * p2 * y
    dxy[:, 1, 1] = radial + y * dradial_dr2 * 2.0 * y + p1 * 6.0 * y + 2.0 * p2 * x

    r4 = r2 * r2
    dpsi = np.empty((n, 2, 5))
    dpsi[:, 0, 0] = x * r2
    dpsi[:, 0, 1] = x * r4
    dpsi[:, 0, 2] = x * r4 * r2
    dpsi[:, 0, 3] = 2.0 * x * y
    dpsi[:, 0, 4] = r2 + 2.0 * x * x
    dpsi[:, 1, 0] = y * r2
    dpsi[:, 1, 1] = y * r4
    dpsi[:, 1, 2] = y * r4 * r2
    dpsi[:, 1, 3] = r2 + 2.0 * y * y
    dpsi[:, 1, 4] = 2.0 * x * y
    return xd, yd, dxy, dpsi


def undistort(points, psi: Distortion | np.ndarray, max_iter: int = 50, tol: float = 1e-13) -> np.ndarray:
    """Invert :func:`distort` by Newton iteration, starting from the distorted point.

    Raises UndistortError for points whose iteration does not converge within
    ``max_iter`` steps (outside the invertible region of the map).
    """
    psi = psi.as_array() if isinstance(psi, Distortion) else np.asarray(psi, dtype=float)
    target = np.asarray(points, dtype=float)
    shape = target.shape
    tgt = target.reshape(-1, 2)
    if not np.any(psi):
        return target.copy()
    xy = tgt.copy()
    done = np.zeros(len(tgt), dtype=bool)
    for _ in range(max_iter):
        act = ~done
        if not act.any():
            break
        x, y = xy[act, 0], xy[act, 1]
        xd, yd, dxy, _ = distort_jacobians(x, y, psi)
        ex = xd - tgt[act, 0]
        ey = yd - tgt[act, 1]
        a, b, c, d = dxy[:, 0, 0], dxy[:, 0, 1], dxy[:, 1, 0], dxy[:, 1, 1]
        det = a * d - b * c
        bad = ~(np.abs(det) > 1e-12)
        det = np.where(bad, 1.0, det)
        sx = (d * ex - b * ey) / det
        sy = (-c * ex + a * ey) / det
        xy[act, 0] = x - sx
        xy[act, 1] = y - sy
        scale = 1.0 + np.abs(tgt[act]).max(axis=1)
        conv = (np.hypot(ex, ey) <= tol * scale) | (np.hypot(sx, sy) <= 0.01 * tol * scale)
        conv &= ~bad
        idx = np.flatnonzero(act)
        done[idx[conv]] = True
    if not done.all():
        raise UndistortError(f"{int((~done).sum())} point(s) did not converge; outside the invertible region")
    # a root on the far side of the radial turning point is not a valid inverse
    _, _, dxy, _ = distort_jacobians(xy[:, 0], xy[:, 1], psi)
    det = dxy[:, 0, 0] * dxy[:, 1, 1] - dxy[:, 0, 1] * dxy[:, 1, 0]
    if np.any(det <= 0):
        raise UndistortError("inverse lies beyond the radial turning point")
    return xy.reshape(shape)


# --------------------------------------------------------------------------- projection


def transform_points(object_points, rvec, tvec) -> np.ndarray:
    return np.asarray(object_points, dtype=float) @ rodrigues(rvec).T + np.asarray(tvec, dtype=float)


def project_points(object_points, rvec, tvec, intr: Intrinsics | np.ndarray, psi, pixel_units: bool = False) -> np.ndarray:
    """Project (n, 3) pattern points into pixels; returns (n, 2)."""
    uv, _ = project_with_jacobian(object_points, rvec, tvec, intr, psi, pixel_units=pixel_units, jacobian=False)
    return uv


def project_with_jacobian(object_points, rvec, tvec, intr, psi, pixel_units: bool = False, jacobian: bool = True):
    """Projection and its Jacobian w.r.t. [fx, fy, u0, v0, k1, k2, k3, p1, p2, w(3), t(3)].

    Returns uv (n, 2) and J (n, 2, 15) or None.
    """
    k = intr.as_array() if isinstance(intr, Intrinsics) else np.asarray(intr, dtype=float)
    fx, fy, u0, v0 = k
    psi = psi.as_array() if isinstance(psi, Distortion) else np.asarray(psi, dtype=float)
    X = np.asarray(object_points, dtype=float)
    R = rodrigues(rvec)
    Xc = X @ R.T + np.asarray(tvec, dtype=float)
    iz = 1.0 / Xc[:, 2]
    x = Xc[:, 0] * iz
    y = Xc[:, 1] * iz

    if pixel_units:
        X_p, Y_p = fx * x, fy * y
        if not jacobian:
            xd, yd = _distort_xy(X_p, Y_p, psi)
            return np.stack([xd + u0, yd + v0], axis=1), None
        xd, yd, dxy, dpsi = distort_jacobians(X_p, Y_p, psi)
        uv = np.stack([xd + u0, yd + v0], axis=1)
        # d(uv)/d(x, y) through the pixel scaling
        duv_dxy = dxy * np.array([fx, fy])[None, None, :]
        n = len(X)
        J = np.zeros((n, 2, 15))
        J[:, :, 0] = dxy[:, :, 0] * x[:, None]
        J[:, :, 1] = dxy[:, :, 1] * y[:, None]
        J[:, 0, 2] = 1.0
        J[:, 1, 3] = 1.0
        J[:, :, 4:9] = dpsi
    else:
        if not jacobian:
            xd, yd = _distort_xy(x, y, psi)
            return np.stack([fx * xd + u0, fy * yd + v0], axis=1), None
        xd, yd, dxy, dpsi = distort_jacobians(x, y, psi)
        uv = np.stack([fx * xd + u0, fy * yd + v0], axis=1)
        f = np.array([fx, fy])
        duv_dxy = dxy * f[None, :, None]
        n = len(X)
        J = np.zeros((n, 2, 15))
        J[:, 0, 0] = xd
        J[:, 1, 1] = yd
        J[:, 0, 2] = 1.0
        J[:, 1, 3] = 1.0
        J[:, :, 4:9] = dpsi * f[None, :, None]

    # d(x, y)/d(Xc)
    dxy_dXc = np.zeros((len(X), 2, 3))
    dxy_dXc[:, 0, 0] = iz
    dxy_dXc[:, 0, 2] = -x * iz
    dxy_dXc[:, 1, 1] = iz
    dxy_dXc[:, 1, 2] = -y * iz
    duv_dXc = np.einsum("nij,njk->nik", duv_dxy, dxy_dXc)
    # d(Xc)/dw = -R [X]_x Jr
    Jr = rotation_right_jacobian(rvec)
    Xs = np.zeros((len(X), 3, 3))
    Xs[:, 0, 1] = -X[:, 2]
    Xs[:, 0, 2] = X[:, 1]
    Xs[:, 1, 0] = X[:, 2]
    Xs[:, 1, 2] = -X[:, 0]
    Xs[:, 2, 0] = -X[:, 1]
    Xs[:, 2, 1] = X[:, 0]
    dXc_dw = -np.einsum("ij,njk,kl->nil", R, Xs, Jr)
    J[:, :, 9:12] = np.einsum("nij,njk->nik", duv_dXc, dXc_dw)
    J[:, :, 12:15] = duv_dXc
    return uv, J
