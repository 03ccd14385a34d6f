"""Robust slanted-cylinder fitting for event clusters (Gaussian self-reweighting).

A circle moving in the image traces a cylinder in (x, y, t). The cylinder is
parameterized by omega = [r, u, v, beta, alpha]: radius r, the axis crossing
(u, v) of the reference-time plane t = t_ref, and the axis tilt given by
rotations beta (about x) and alpha (about y). Events are mapped to the
cylinder body frame by

    p_body = R_x(beta) R_y(alpha) (p - (u, v, t_ref))

so the axis becomes the body t-axis; the residual of an event is
x_body**2 + y_body**2 - r**2. Each LM iteration reweights residuals with the
Gaussian density of the current residual distribution, which suppresses
outliers without an inner IRLS loop.

Coordinates must be isotropic in x and y (a circle must stay a circle);
:func:`fit_cluster` takes normalized window events and handles the conversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
from typing import Optional

import numpy as np

from .nlls import LMDivergedError, LMProblem, LMSettings, solve

SIGMA_FLOOR = 1e-12
MIN_CLUSTER_SIZE = 6
# reweighting converges linearly (ratio ~0.5); a 1e-5 relative step is ~0.003 px
DEFAULT_FIT_SETTINGS = LMSettings(max_iters=50, tol_step=1e-5, tol_cost=1e-9)
# Welsch tuning for 95% Gaussian efficiency: exp(-(z / 2.9846)^2) = N(0, 2.9846 / sqrt(2))
WELSCH_WIDTH = 2.9846 / math.sqrt(2.0)


@dataclass(frozen=True)
class CylinderParams:
    r: float
    u: float
    v: float
    beta: float = 0.0
    alpha: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.u, self.v, self.beta, self.alpha])

    @classmethod
    def from_array(cls, a) -> "CylinderParams":
        r, u, v, b, al = (float(x) for x in a)
        return cls(abs(r), u, v, _wrap_half_pi(b), _wrap_half_pi(al))


def _wrap_half_pi(a: float) -> float:
    return (a + math.pi / 2) % math.pi - math.pi / 2


@dataclass(frozen=True)
class FitContext:
    t_ref: float = 0.0


@dataclass
class FitDiagnostics:
    converged: bool
    iterations: int
    cost: float
    inlier_fraction: float
    rejected: Optional[str] = None
    residual_history: list[np.ndarray] = field(default_factory=list)


class ClusterRejected(ValueError):
    pass


def _rotation(beta: float, alpha: float):
    cb, sb = math.cos(beta), math.sin(beta)
    ca, sa = math.cos(alpha), math.sin(alpha)
    # Rx(beta) @ Ry(alpha) and its partials, expanded
    R = np.array([[ca, 0.0, sa], [sb * sa, cb, -sb * ca], [-cb * sa, sb, cb * ca]])
    dRb = np.array([[0.0, 0.0, 0.0], [cb * sa, -sb, -cb * ca], [sb * sa, cb, -sb * ca]])
    dRa = np.array([[-sa, 0.0, ca], [sb * ca, 0.0, sb * sa], [-cb * ca, 0.0, -cb * sa]])
    return R, dRb, dRa


def body_transform(points, omega, t_ref: float = 0.0) -> np.ndarray:
    """Map (n, 3) window points into the cylinder body frame."""
    p = np.asarray(points, dtype=float)
    om = omega.as_array() if isinstance(omega, CylinderParams) else np.asarray(omega, dtype=float)
    R, _, _ = _rotation(om[3], om[4])
    return (p - np.array([om[1], om[2], t_ref])) @ R.T


def residuals(points, omega, t_ref: float = 0.0) -> np.ndarray:
    """xi_k = x_body**2 + y_body**2 - r**2."""
    om = omega.as_array() if isinstance(omega, CylinderParams) else np.asarray(omega, dtype=float)
    p = np.asarray(points, dtype=float)
    R, _, _ = _rotation(om[3], om[4])
    d = p - np.array([om[1], om[2], t_ref])
    b = d @ R[:2].T
    return b[:, 0] ** 2 + b[:, 1] ** 2 - om[0] ** 2


def residuals_and_jacobian(points, omega, t_ref: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Residuals and their analytic Jacobian w.r.t. [r, u, v, beta, alpha]."""
    p = np.asarray(points, dtype=float)
    om = np.asarray(omega, dtype=float)
    R, dRb, dRa = _rotation(om[3], om[4])
    d = p - np.array([om[1], om[2], t_ref])
    bx = d @ R[0]
    by = d @ R[1]
    xi = bx * bx + by * by - om[0] ** 2
    J = np.empty((len(p), 5))
    J[:, 0] = -2.0 * om[0]
    # d(body)/du = -R[:, 0], d(body)/dv = -R[:, 1]
    J[:, 1] = -2.0 * (bx * R[0, 0] + by * R[1, 0])
    J[:, 2] = -2.0 * (bx * R[0, 1] + by * R[1, 1])
    J[:, 3] = 2.0 * (bx * (d @ dRb[0]) + by * (d @ dRb[1]))
    J[:, 4] = 2.0 * (bx * (d @ dRa[0]) + by * (d @ dRa[1]))
    return xi, J


def _median(a: np.ndarray) -> float:
    # np.median carries ~25 us of overhead, which dominates on small clusters
    s = np.sort(a)
    n = len(s)
    return float(s[n // 2]) if n % 2 else 0.5 * float(s[n // 2 - 1] + s[n // 2])


def gaussian_weights(xi, stats: str = "moments", width: float = 1.0) -> np.ndarray:
    """Normal density of each residual under a Gaussian fitted to the residuals.

    ``stats="moments"`` uses the plain mean and standard deviation.
    ``stats="robust"`` uses the median and 1.4826 * MAD, which keeps the
    Gaussian on the inlier mode when a minority of residuals is gross.
    The Gaussian's standard deviation is ``width`` times the estimated
    spread; values above 1 trade a little robustness for efficiency.
    Uniform weights are returned when the spread is below ``SIGMA_FLOOR``.
    """
    xi = np.asarray(xi, dtype=float)
    if stats == "moments":
        mu = xi.mean()
        sigma = xi.std()
    elif stats == "robust":
        mu = _median(xi)
        sigma = 1.4826 * _median(np.abs(xi - mu))
    else:
        raise ValueError(f"unknown weight statistics {stats!r}")
    if not sigma > SIGMA_FLOOR:
        return np.ones_like(xi)
    sigma *= width
    z = (xi - mu) / sigma
    return np.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def initial_guess(points) -> np.ndarray:
    """Median center of the spatial stamps and median distance to it; no tilt."""
    p = np.asarray(points, dtype=float)
    u0 = float(np.median(p[:, 0]))
    v0 = float(np.median(p[:, 1]))
    r0 = float(np.median(np.hypot(p[:, 0] - u0, p[:, 1] - v0)))
    return np.array([max(r0, 1e-9), u0, v0, 0.0, 0.0])


def fit_cylinder(
    points,
    ctx: FitContext = FitContext(),
    weighted: bool = True,
    settings: Optional[LMSettings] = None,
    keep_history: bool = False,
    weight_stats: str = "robust",
    weight_width: float = WELSCH_WIDTH,
) -> tuple[CylinderParams, FitDiagnostics]:
    """Fit a cylinder to one cluster of (n, 3) isotropic points.

    ``weighted=False`` gives the plain least-squares fit. ``weight_stats``
    and ``weight_width`` select how the reweighting Gaussian is estimated
    (see :func:`gaussian_weights`). Raises ClusterRejected for clusters smaller
    than 6 events or when the solver diverges.
    """
    p = np.asarray(points, dtype=float)
    if len(p) < MIN_CLUSTER_SIZE:
        raise ClusterRejected(f"cluster of {len(p)} events is below the minimum of {MIN_CLUSTER_SIZE}")
    settings = settings or DEFAULT_FIT_SETTINGS
    t_ref = ctx.t_ref
    history: list[np.ndarray] = []

    def res(om):
        return residuals(p, om, t_ref)

    def res_jac(om):
        xi, J = residuals_and_jacobian(p, om, t_ref)
        if keep_history:
            history.append(xi.copy())
        return xi, J

    def weights(xi):
        return gaussian_weights(xi, weight_stats, weight_width)

    # a tilt change moves the rim by at most (time span) * d_angle
    span = max(float(np.ptp(p[:, 2])), 1e-9)
    problem = LMProblem(
        res,
        weight_fn=weights if weighted else None,
        residual_and_jacobian_fn=res_jac,
        param_scale=np.array([1.0, 1.0, 1.0, span, span]),
    )
    try:
        result = solve(problem, initial_guess(p), settings)
    except LMDivergedError as exc:
        raise ClusterRejected(f"fit diverged: {exc}") from exc
    om = result.params
    if not np.all(np.isfinite(om)) or abs(om[0]) <= 0:
        raise ClusterRejected("degenerate cylinder radius")
    xi = residuals(p, om, t_ref)
    w = gaussian_weights(xi, weight_stats, weight_width)
    inliers = float(np.mean(w > 0.5 * w.max())) if len(w) else 0.0
    diag = FitDiagnostics(
        converged=result.converged,
        iterations=result.iterations,
        cost=result.cost,
        inlier_fraction=inliers,
        residual_history=history,
    )
    return CylinderParams.from_array(om), diag


def _rotation_many(beta: np.ndarray, alpha: np.ndarray):
    cb, sb, ca, sa = np.cos(beta), np.sin(beta), np.cos(alpha), np.sin(alpha)
    z = np.zeros_like(beta)
    R = np.stack([np.stack([ca, z, sa], -1), np.stack([sb * sa, cb, -sb * ca], -1), np.stack([-cb * sa, sb, cb * ca], -1)], -2)
    dRb = np.stack([np.stack([z, z, z], -1), np.stack([cb * sa, -sb, -cb * ca], -1), np.stack([sb * sa, cb, -sb * ca], -1)], -2)
    dRa = np.stack([np.stack([-sa, z, ca], -1), np.stack([sb * ca, z, sb * sa], -1), np.stack([-cb * ca, z, -cb * sa], -1)], -2)
    return R, dRb, dRa


def _batch_residuals(P: np.ndarray, om: np.ndarray, t_ref: float, jac: bool):
    R, dRb, dRa = _rotation_many(om[:, 3], om[:, 4])
    d = P - np.stack([om[:, 1], om[:, 2], np.full(len(om), t_ref)], -1)[:, None, :]
    b = d @ R[:, :2, :].transpose(0, 2, 1)
    bx, by = b[..., 0], b[..., 1]
    xi = bx * bx + by * by - (om[:, 0] ** 2)[:, None]
    if not jac:
        return xi, None
    J = np.empty(xi.shape + (5,))
    J[..., 0] = -2.0 * om[:, 0][:, None]
    J[..., 1] = -2.0 * (bx * R[:, 0, 0][:, None] + by * R[:, 1, 0][:, None])
    J[..., 2] = -2.0 * (bx * R[:, 0, 1][:, None] + by * R[:, 1, 1][:, None])
    db = d @ dRb[:, :2, :].transpose(0, 2, 1)
    da = d @ dRa[:, :2, :].transpose(0, 2, 1)
    J[..., 3] = 2.0 * (bx * db[..., 0] + by * db[..., 1])
    J[..., 4] = 2.0 * (bx * da[..., 0] + by * da[..., 1])
    return xi, J


def _batch_median(a: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Row medians of the first ``counts[c]`` entries (padding is +inf)."""
    s = np.sort(a, axis=1)
    lo = np.take_along_axis(s, ((counts - 1) // 2)[:, None], axis=1)[:, 0]
    hi = np.take_along_axis(s, (counts // 2)[:, None], axis=1)[:, 0]
    return 0.5 * (lo + hi)


def _batch_weights(xi: np.ndarray, mask: np.ndarray, counts: np.ndarray, stats: str, width: float = 1.0) -> np.ndarray:
    if stats == "robust":
        mu = _batch_median(np.where(mask, xi, np.inf), counts)
        sigma = 1.4826 * _batch_median(np.where(mask, np.abs(xi - mu[:, None]), np.inf), counts)
    elif stats == "moments":
        mu = np.where(mask, xi, 0.0).sum(axis=1) / counts
        sigma = np.sqrt(np.where(mask, (xi - mu[:, None]) ** 2, 0.0).sum(axis=1) / counts)
    else:
        raise ValueError(f"unknown weight statistics {stats!r}")
    flat = ~(sigma > SIGMA_FLOOR)
    sig = np.where(flat, 1.0, sigma * width)
    z = (xi - mu[:, None]) / sig[:, None]
    w = np.exp(-0.5 * z * z) / (sig[:, None] * math.sqrt(2.0 * math.pi))
    w = np.where(flat[:, None], 1.0, w)
    return np.where(mask, w, 0.0)


def fit_cylinders(
    clusters: list[np.ndarray],
    ctx: FitContext = FitContext(),
    weighted: bool = True,
    settings: Optional[LMSettings] = None,
    weight_stats: str = "robust",
    weight_width: float = WELSCH_WIDTH,
) -> list[tuple[CylinderParams, FitDiagnostics] | ClusterRejected]:
    """Fit many clusters at once; each entry matches :func:`fit_cylinder`.

    The damped, reweighted iteration runs in lockstep over a padded batch,
    with per-cluster damping, acceptance and convergence. Clusters that are
    too small or whose fit diverges come back as ClusterRejected instances.
    """
    st = settings or DEFAULT_FIT_SETTINGS
    out: list = [None] * len(clusters)
    live = []
    for k, c in enumerate(clusters):
        c = np.asarray(c, dtype=float)
        if len(c) < MIN_CLUSTER_SIZE:
            out[k] = ClusterRejected(f"cluster of {len(c)} events is below the minimum of {MIN_CLUSTER_SIZE}")
        else:
            live.append(k)
    if not live:
        return out
    C = len(live)
    counts = np.array([len(clusters[k]) for k in live])
    nmax = int(counts.max())
    P = np.zeros((C, nmax, 3))
    mask = np.arange(nmax)[None, :] < counts[:, None]
    for i, k in enumerate(live):
        c = np.asarray(clusters[k], dtype=float)
        P[i, : len(c)] = c
        # pad with copies of the first point; padded rows carry zero weight
        P[i, len(c) :] = c[0]
    t_ref = ctx.t_ref
    span = np.maximum(np.ptp(np.where(mask, P[..., 2], P[:, :1, 2]), axis=1), 1e-9)
    sc = np.stack([np.ones(C), np.ones(C), np.ones(C), span, span], -1)
    x = np.array([initial_guess(np.asarray(clusters[k], dtype=float)) for k in live])

    def weights(xi, idx):
        if weighted:
            return _batch_weights(xi, mask[idx], counts[idx], weight_stats, weight_width)
        return mask[idx].astype(float)

    xi, J = _batch_residuals(P, x, t_ref, True)
    w = weights(xi, slice(None))
    cost = (w * xi * xi).sum(axis=1)
    lam = np.full(C, st.initial_damping)
    active = np.ones(C, dtype=bool)
    converged = np.zeros(C, dtype=bool)
    failed = np.zeros(C, dtype=bool)
    iters = np.zeros(C, dtype=int)
    eye = np.eye(5)

    for _ in range(st.max_iters):
        if not active.any():
            break
        a = np.flatnonzero(active)
        iters[a] += 1
        JtW = (J[a] * w[a][..., None]).transpose(0, 2, 1)
        A = JtW @ J[a]
        g = (JtW @ xi[a][..., None])[..., 0]
        diag = np.diagonal(A, axis1=1, axis2=2).copy()
        floor = np.maximum(diag.max(axis=1), 1.0) * 1e-12
        diag = np.maximum(diag, floor[:, None])

        searching = np.ones(len(a), dtype=bool)
        accepted = np.zeros(len(a), dtype=bool)
        step = np.zeros((len(a), 5))
        new_cost = np.zeros(len(a))
        while searching.any():
            s_idx = np.flatnonzero(searching)
            over = lam[a[s_idx]] > st.damping_ceiling
            if over.any():
                failed[a[s_idx[over]]] = True
                searching[s_idx[over]] = False
                s_idx = s_idx[~over]
                if not len(s_idx):
                    break
            Aug = A[s_idx] + lam[a[s_idx]][:, None, None] * diag[s_idx][:, :, None] * eye
            try:
                stp = -np.linalg.solve(Aug, g[s_idx][..., None])[..., 0]
            except np.linalg.LinAlgError:
                stp = np.full((len(s_idx), 5), np.nan)
                for m, i in enumerate(s_idx):
                    try:
                        stp[m] = -np.linalg.solve(Aug[m], g[i])
                    except np.linalg.LinAlgError:
                        pass
            x_try = x[a[s_idx]] + stp
            xi_try, _ = _batch_residuals(P[a[s_idx]], x_try, t_ref, False)
            c_try = (w[a[s_idx]] * xi_try * xi_try).sum(axis=1)
            ok = np.isfinite(c_try) & np.all(np.isfinite(stp), axis=1) & (c_try <= cost[a[s_idx]])
            good = s_idx[ok]
            step[good] = stp[ok]
            new_cost[good] = c_try[ok]
            accepted[good] = True
            searching[good] = False
            bad = s_idx[~ok]
            if len(bad):
                lam[a[bad]] *= st.damping_up
                stp_bad = np.nan_to_num(stp[~ok], nan=np.inf)
                tiny = np.sqrt(((sc[a[bad]] * stp_bad) ** 2).sum(axis=1)) < st.tol_step * (
                    np.sqrt(((sc[a[bad]] * x[a[bad]]) ** 2).sum(axis=1)) + st.tol_step
                )
                converged[a[bad[tiny]]] = True
                searching[bad[tiny]] = False

        done = ~accepted
        acc = a[accepted]
        if len(acc):
            sn = np.sqrt(((sc[acc] * step[accepted]) ** 2).sum(axis=1))
            rel = (cost[acc] - new_cost[accepted]) / np.maximum(cost[acc], 1e-300)
            x[acc] += step[accepted]
            lam[acc] = np.maximum(lam[acc] * st.damping_down, 1e-15)
            xi_a, J_a = _batch_residuals(P[acc], x[acc], t_ref, True)
            xi[acc], J[acc] = xi_a, J_a
            w[acc] = weights(xi_a, acc)
            cost[acc] = (w[acc] * xi_a * xi_a).sum(axis=1)
            xn = np.sqrt(((sc[acc] * x[acc]) ** 2).sum(axis=1))
            stop = (sn < st.tol_step * (xn + st.tol_step)) | (rel < st.tol_cost) | (cost[acc] == 0.0)
            converged[acc[stop]] = True
            active[acc[stop]] = False
        active[a[done]] = False

    for i, k in enumerate(live):
        om = x[i]
        if failed[i] or not np.all(np.isfinite(om)) or abs(om[0]) <= 0:
            out[k] = ClusterRejected("fit diverged" if failed[i] else "degenerate cylinder radius")
            continue
        n = counts[i]
        wi = gaussian_weights(xi[i, :n], weight_stats, weight_width) if weighted else np.ones(n)
        diag_k = FitDiagnostics(
            converged=bool(converged[i]),
            iterations=int(iters[i]),
            cost=float(cost[i]),
            inlier_fraction=float(np.mean(wi > 0.5 * wi.max())),
        )
        out[k] = (CylinderParams.from_array(om), diag_k)
    return out


@dataclass(frozen=True)
class PixelCylinder:
    """A fitted cylinder reported in pixel units at the window reference time."""

    center: tuple[float, float]
    radius: float
    params: CylinderParams
    diagnostics: FitDiagnostics
    n_events: int


def isotropic_scale(width: int, height: int) -> float:
    return float(max(width, height))


def _isotropic(xyt_normalized, width: int, height: int) -> np.ndarray:
    s = isotropic_scale(width, height)
    pts = np.asarray(xyt_normalized, dtype=float).copy()
    pts[:, 0] *= width / s
    pts[:, 1] *= height / s
    return pts


def fit_clusters(clusters: list[np.ndarray], width: int, height: int, weighted: bool = True, **kw) -> list:
    """Batched :func:`fit_cluster`; rejected clusters come back as ClusterRejected."""
    s = isotropic_scale(width, height)
    pts = [_isotropic(c, width, height) for c in clusters]
    res = fit_cylinders(pts, FitContext(0.0), weighted=weighted, **kw)
    out = []
    for p, r in zip(pts, res):
        if isinstance(r, ClusterRejected):
            out.append(r)
        else:
            params, diag = r
            out.append(PixelCylinder((params.u * s, params.v * s), params.r * s, params, diag, len(p)))
    return out


def fit_cluster(xyt_normalized: np.ndarray, width: int, height: int, weighted: bool = True, **kw) -> PixelCylinder:
    """Fit one cluster of normalized window events and report pixels.

    x and y are rescaled by a common factor max(W, H) before fitting so that
    image circles stay circular; time keeps its normalized scale and the
    centroid is taken on the t = 0 (window start) plane.
    """
    s = isotropic_scale(width, height)
    pts = np.asarray(xyt_normalized, dtype=float).copy()
    pts[:, 0] *= width / s
    pts[:, 1] *= height / s
    params, diag = fit_cylinder(pts, FitContext(0.0), weighted=weighted, **kw)
    return PixelCylinder((params.u * s, params.v * s), params.r * s, params, diag, len(pts))


def write_residual_histograms(path, history: list[np.ndarray], bins: int = 50) -> None:
    """CSV of per-iteration residual histograms (from ``keep_history=True``).

    All iterations share the bin edges of the final iteration's residual
    range, so the columns line up when plotted as a sequence of PDFs.
    """
    if not history:
        raise ValueError("empty residual history")
    lo, hi = float(np.min(history[-1])), float(np.max(history[-1]))
    if not hi > lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,bin_lo,bin_hi,count\n")
        for it, xi in enumerate(history):
            counts, _ = np.histogram(np.clip(xi, lo, hi), edges)
            for b in range(bins):
                fh.write(f"{it},{edges[b]!r},{edges[b + 1]!r},{int(counts[b])}\n")

