"""Damped nonlinear least squares (Levenberg-Marquardt) with optional reweighting.

Shared by the cylinder fitter and the calibration bundle. Parameter counts are
small (5 for a cylinder, 9 + 6N for calibration), so the normal equations are
formed densely and solved with a Cholesky factorization.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

ResidualFn = Callable[[np.ndarray], np.ndarray]
JacobianFn = Callable[[np.ndarray], np.ndarray]
WeightFn = Callable[[np.ndarray], np.ndarray]


class LMError(RuntimeError):
    """Base class for solver failures; carries the last good iterate."""

    def __init__(self, message: str, params: np.ndarray):
        super().__init__(message)
        self.params = params


class LMDivergedError(LMError):
    pass


@dataclass
class LMProblem:
    residual_fn: ResidualFn
    jacobian_fn: Optional[JacobianFn] = None
    weight_fn: Optional[WeightFn] = None
    # when set, evaluates (residual, jacobian) in one pass
    residual_and_jacobian_fn: Optional[Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = None
    # per-parameter scale applied to steps and iterates in the convergence test
    param_scale: Optional[np.ndarray] = None

    def evaluate(self, params: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.residual_and_jacobian_fn is not None:
            return self.residual_and_jacobian_fn(params)
        r = self.residual_fn(params)
        if self.jacobian_fn is None:
            return r, finite_difference_jacobian(self.residual_fn, params)
        return r, self.jacobian_fn(params)


@dataclass(frozen=True)
class LMSettings:
    max_iters: int = 100
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    tol_step: float = 1e-10
    tol_cost: float = 1e-12
    damping_ceiling: float = 1e16

    def __post_init__(self) -> None:
        if self.max_iters <= 0 or self.initial_damping <= 0 or self.tol_step <= 0 or self.tol_cost <= 0:
            raise ValueError("LM settings must be positive")
        if not (self.damping_up > 1.0 > self.damping_down > 0.0):
            raise ValueError("require damping_up > 1 > damping_down > 0")


@dataclass
class LMResult:
    params: np.ndarray
    cost: float
    iterations: int
    converged: bool
    cost_trace: list[float] = field(default_factory=list)
    # (cost before, cost after) under the weights frozen for that acceptance test
    accepted_pairs: list[tuple[float, float]] = field(default_factory=list)


def _weighted_cost(r: np.ndarray, w: Optional[np.ndarray]) -> float:
    if w is None:
        return float(r @ r)
    return float((w * r) @ r)


def _norm(v: np.ndarray) -> float:
    return math.sqrt(float(v @ v))


def _finite(r: np.ndarray, J: np.ndarray) -> bool:
    return math.isfinite(float(r @ r)) and math.isfinite(float(J.sum()))


def solve(problem: LMProblem, init, settings: LMSettings = LMSettings()) -> LMResult:
    """Minimize sum(w * r**2) starting at ``init``.

    Weights, when ``problem.weight_fn`` is given, are recomputed from the
    current residuals once per outer iteration and held fixed while the
    damping loop searches for an acceptable step.
    """
    x = np.array(init, dtype=float)
    r, J = problem.evaluate(x)
    if not _finite(r, J):
        raise LMDivergedError("non-finite residual or Jacobian at the initial point", x.copy())

    n_par = x.size
    sc = np.ones(n_par) if problem.param_scale is None else np.asarray(problem.param_scale, dtype=float)
    lam = settings.initial_damping
    w = problem.weight_fn(r) if problem.weight_fn is not None else None
    cost = _weighted_cost(r, w)
    trace = [cost]
    pairs: list[tuple[float, float]] = []
    converged = False
    it = 0

    while it < settings.max_iters:
        it += 1
        if w is None:
            JtW = J.T
        else:
            JtW = J.T * w
        A = JtW @ J
        g = JtW @ r
        diag = np.diag(A).copy()
        diag_floor = max(float(diag.max(initial=0.0)), 1.0) * 1e-12
        np.maximum(diag, diag_floor, out=diag)

        accepted = False
        while not accepted:
            if lam > settings.damping_ceiling:
                raise LMDivergedError("damping exceeded ceiling; normal equations singular", x.copy())
            Aug = A.copy()
            Aug.flat[:: n_par + 1] += lam * diag
            try:
                step = -cho_solve(cho_factor(Aug, check_finite=False), g, check_finite=False)
            except LinAlgError:
                lam *= settings.damping_up
                continue
            x_new = x + step
            r_new = problem.residual_fn(x_new)
            if not math.isfinite(float(r_new @ r_new)):
                lam *= settings.damping_up
                continue
            new_cost = _weighted_cost(r_new, w)
            if new_cost <= cost:
                accepted = True
            else:
                lam *= settings.damping_up
                if _norm(sc * step) < settings.tol_step * (_norm(sc * x) + settings.tol_step):
                    # no descent possible at this resolution
                    converged = True
                    break
        if not accepted:
            break

        pairs.append((cost, new_cost))
        rel_drop = (cost - new_cost) / max(cost, 1e-300)
        step_norm = _norm(sc * step)
        x = x_new
        lam = max(lam * settings.damping_down, 1e-15)

        r, J = problem.evaluate(x)
        if not _finite(r, J):
            raise LMDivergedError("non-finite residual or Jacobian during iteration", x.copy())
        if problem.weight_fn is not None:
            w = problem.weight_fn(r)
        cost = _weighted_cost(r, w)
        trace.append(cost)

        if step_norm < settings.tol_step * (_norm(sc * x) + settings.tol_step) or rel_drop < settings.tol_cost:
            converged = True
            break
        if cost == 0.0:
            converged = True
            break

    return LMResult(params=x, cost=cost, iterations=it, converged=converged, cost_trace=trace, accepted_pairs=pairs)


def finite_difference_jacobian(residual_fn: ResidualFn, params, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian; column j is (r(p + h e_j) - r(p - h e_j)) / 2h."""
    p = np.array(params, dtype=float)
    r0 = np.asarray(residual_fn(p), dtype=float)
    J = np.empty((r0.size, p.size))
    for j in range(p.size):
        dp = np.zeros_like(p)
        dp[j] = h
        J[:, j] = (np.asarray(residual_fn(p + dp)) - np.asarray(residual_fn(p - dp))).ravel() / (2.0 * h)
    return J


def column_relative_error(J_analytic: np.ndarray, J_numeric: np.ndarray) -> float:
    """Max elementwise error scaled by each column's largest magnitude."""
    scale = np.maximum(np.abs(J_analytic).max(axis=0), np.abs(J_numeric).max(axis=0))
    scale = np.where(scale > 0, scale, 1.0)
    return float((np.abs(J_analytic - J_numeric) / scale).max(initial=0.0))
