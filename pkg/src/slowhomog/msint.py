"""Integral constraints on slowly varying inclusions in multiple-scales form.

For a flux ``Q(x, X)`` and an inclusion whose radius ``a(x)`` varies on the
slow scale, the flux through the boundary of the inclusion in the cell
anchored at ``x_hat`` is

    I(delta) = delta^p oint Q(x_hat + delta X, X) . n dS_X

over the true boundary ``|X - c| = a(x_hat + delta X)``.  The expansion
kept here is

    correct:  delta^p oint [Q + delta X.grad_x Q + delta (div_X Q)(X.V)] . n0 dS
    naive:    delta^p oint [Q + delta X.grad_x Q] . (n0 + delta n1) dS

on the fixed circle ``|X - c| = a(x_hat)``.  The first is accurate to
``O(delta^2)`` inside the bracket; the second misses the boundary-motion term
and carries a spurious ``O(delta)`` error.  ``p`` is the measure exponent
(1 for curves in the plane).

On an open arc the boundary motion also moves the arc's end points, which
adds ``delta [Q x (X.V)]`` evaluated between the end points, where ``u x w``
is the scalar cross product ``u1 w2 - u2 w1``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .cellsolve import CellSolution
from .exprlang import FieldExpr, as_expr, gradient_fd
from .geometry import CENTER, BoundaryQuadrature, CellGeometry, arc_quadrature, boundary_quadrature
from .mesh import EXTERIOR

FD_STEP = 1e-5
MAX_DELTA = 0.2
RESIDUAL_FLOOR = 1e-13
# orientation of the end-point term relative to (X.V) x Q; fixed against the
# open-arc oracle (see tests/test_msint.py::test_gamma_sign_calibration)
GAMMA_SIGN = -1.0


class MsIntError(RuntimeError):
    pass


def cross(u, w) -> np.ndarray:
    u, w = np.asarray(u), np.asarray(w)
    return u[..., 0] * w[..., 1] - u[..., 1] * w[..., 0]


@dataclass(frozen=True)
class FluxField:
    """Smooth synthetic flux ``Q(x1, x2, X1, X2)``."""

    Q1: FieldExpr
    Q2: FieldExpr

    def __post_init__(self):
        object.__setattr__(self, "Q1", as_expr(self.Q1))
        object.__setattr__(self, "Q2", as_expr(self.Q2))

    @staticmethod
    def _env(x, X):
        x = np.asarray(x, dtype=float)
        X = np.asarray(X, dtype=float)
        return {"x1": x[..., 0], "x2": x[..., 1], "X1": X[..., 0], "X2": X[..., 1]}

    def value(self, x, X) -> np.ndarray:
        env = self._env(x, X)
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(X)[:-1])
        return np.stack([np.broadcast_to(q.evaluate(env), shape) for q in (self.Q1, self.Q2)], axis=-1)

    def slow_gradient(self, x, X) -> np.ndarray:
        """``G[..., j, k] = dQ_k/dx_j`` by central differences."""
        env = self._env(x, X)
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(X)[:-1])
        out = np.empty(shape + (2, 2))
        for j, var in enumerate(("x1", "x2")):
            for k, q in enumerate((self.Q1, self.Q2)):
                out[..., j, k] = np.broadcast_to(gradient_fd(q, var, env, FD_STEP), shape)
        return out

    def fast_divergence(self, x, X) -> np.ndarray:
        env = self._env(x, X)
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(X)[:-1])
        d = gradient_fd(self.Q1, "X1", env, FD_STEP) + gradient_fd(self.Q2, "X2", env, FD_STEP)
        return np.broadcast_to(d, shape)

    def boundary_values(self, quad: BoundaryQuadrature, x_hat) -> np.ndarray:
        return self.value(np.asarray(x_hat, dtype=float), quad.points)


@dataclass(frozen=True)
class CellFlux:
    """Leading-order exterior flux ``eps_e (grad_X Psi . G + G)`` of a cell solution.

    ``G`` is the macroscale gradient ``grad_x phi0``.  Values on the circle
    are taken from the exterior triangle adjacent to the interface chord
    that subtends each quadrature angle.
    """

    solution: CellSolution
    macro_gradient: tuple[float, float] = (1.0, 0.0)

    def boundary_values(self, quad: BoundaryQuadrature, x_hat=None) -> np.ndarray:
        sol = self.solution
        mesh = sol.mesh
        if sol.psi is None:
            raise ValueError("CellFlux needs a Psi solution")
        G = np.asarray(self.macro_gradient, dtype=float)
        field = G[0] * sol.psi[0] + G[1] * sol.psi[1]
        grads = fem.p1_gradients(mesh.vertices, mesh.triangles, field)
        # chord lookup by the angle of its first end point
        start = mesh.vertices[mesh.interface_edges[:, 0]] - CENTER
        ang = np.mod(np.arctan2(start[:, 1], start[:, 0]), 2 * np.pi)
        order = np.argsort(ang)
        idx = np.searchsorted(ang[order], np.mod(quad.theta, 2 * np.pi), side="right") - 1
        edge = order[idx % len(order)]
        tri = mesh.interface_exterior_tri[edge]
        assert np.all(mesh.region[tri] == EXTERIOR)
        return sol.spec.eps_e * (grads[tri] + G)


def _check_delta(delta):
    if not 0 < delta <= MAX_DELTA:
        raise ValueError(f"delta={delta!r} outside (0, {MAX_DELTA}]")


def _correct_integrand(flux: FluxField, geom: CellGeometry, x_hat, delta, quad):
    X = quad.points
    x = np.asarray(x_hat, dtype=float)
    Q = flux.value(x, X)
    slow = np.einsum("qj,qjk->qk", X, flux.slow_gradient(x, X))
    div = flux.fast_divergence(x, X)
    XV = np.einsum("qj,qjk->qk", X, quad.velocity)
    n0 = quad.normals0
    return np.einsum("qk,qk->q", Q + delta * slow + delta * div[:, None] * XV, n0)


def ms_form_correct(flux: FluxField, geom: CellGeometry, x_hat, delta: float, quad: BoundaryQuadrature, exponent: int = 1) -> float:
    """Expansion that accounts for the motion of the boundary; uses ``n0`` only."""
    _check_delta(delta)
    return delta**exponent * quad.integrate(_correct_integrand(flux, geom, x_hat, delta, quad))


def ms_form_naive(flux: FluxField, geom: CellGeometry, x_hat, delta: float, quad: BoundaryQuadrature, exponent: int = 1) -> float:
    """Expansion of the integrand combined with the expansion of the normal."""
    _check_delta(delta)
    X = quad.points
    x = np.asarray(x_hat, dtype=float)
    Q = flux.value(x, X) + delta * np.einsum("qj,qjk->qk", X, flux.slow_gradient(x, X))
    n = quad.normals0 + delta * quad.normals1
    return delta**exponent * quad.integrate(np.einsum("qk,qk->q", Q, n))


def _true_radius(a_expr: FieldExpr, x_hat, delta, theta, tol=1e-14, maxiter=200):
    r_hat = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    x_hat = np.asarray(x_hat, dtype=float)

    def a_at(r):
        x = x_hat + delta * (CENTER + r[:, None] * r_hat)
        return np.broadcast_to(a_expr.evaluate({"x1": x[:, 0], "x2": x[:, 1]}), r.shape)

    r = a_at(np.full(len(theta), float(a_expr.evaluate({"x1": x_hat[0], "x2": x_hat[1]}))))
    for _ in range(maxiter):
        r_new = a_at(r)
        if np.max(np.abs(r_new - r)) <= tol:
            r = r_new
            break
        r = r_new
    else:
        raise MsIntError(f"boundary fixed point did not converge for delta={delta!r}")
    if np.any(r <= 0) or np.any(r >= 0.5):
        raise MsIntError("true boundary leaves the unit cell")
    return r, r_hat


def _true_boundary_integrand(flux: FluxField, a_expr: FieldExpr, x_hat, delta, theta):
    """``Q(x_hat + delta P, P) . N`` with ``N dtheta`` the outward normal times arc length."""
    r, r_hat = _true_radius(a_expr, x_hat, delta, theta)
    perp = np.stack([-r_hat[:, 1], r_hat[:, 0]], axis=-1)
    P = CENTER + r[:, None] * r_hat
    x = np.asarray(x_hat, dtype=float) + delta * P
    env = {"x1": x[:, 0], "x2": x[:, 1]}
    ga = np.stack([np.broadcast_to(gradient_fd(a_expr, v, env, FD_STEP), r.shape) for v in ("x1", "x2")], axis=-1)
    dr = delta * r * np.einsum("qk,qk->q", ga, perp) / (1.0 - delta * np.einsum("qk,qk->q", ga, r_hat))
    T = dr[:, None] * r_hat + r[:, None] * perp
    N = np.stack([T[:, 1], -T[:, 0]], axis=-1)
    return np.einsum("qk,qk->q", flux.value(x, P), N)


def brute_force(flux: FluxField, a_of_x, x_hat, delta: float, n_quad: int = 1024, offset: float = 0.0, exponent: int = 1) -> float:
    """Flux through the true moving boundary at finite ``delta`` (trapezoid rule)."""
    _check_delta(delta)
    if n_quad < 512:
        raise ValueError("brute force needs n_quad >= 512")
    theta = offset + 2 * np.pi * np.arange(n_quad) / n_quad
    vals = _true_boundary_integrand(flux, as_expr(a_of_x), x_hat, delta, theta)
    return delta**exponent * float(vals.sum() * 2 * np.pi / n_quad)


def brute_force_arc(flux: FluxField, a_of_x, x_hat, delta: float, theta_start: float, theta_end: float, n_quad: int = 512, exponent: int = 1) -> float:
    """Same construction restricted to the angular range of an arc (Gauss-Legendre)."""
    _check_delta(delta)
    nodes, w = np.polynomial.legendre.leggauss(n_quad)
    half = 0.5 * (theta_end - theta_start)
    theta = theta_start + half * (nodes + 1.0)
    vals = _true_boundary_integrand(flux, as_expr(a_of_x), x_hat, delta, theta)
    return delta**exponent * float(half * (w @ vals))


def discrepancy_term(Q0, geom: CellGeometry, quad: BoundaryQuadrature, x_hat=(0.0, 0.0)) -> float:
    """``oint Q0 . n1 dS``."""
    Q = Q0.boundary_values(quad, x_hat)
    return quad.integrate(np.einsum("qk,qk->q", Q, quad.normals1))


def motion_term(flux: FluxField, geom: CellGeometry, quad: BoundaryQuadrature, x_hat) -> float:
    """``oint (div_X Q)(X.V.n0) dS``, the boundary-motion contribution."""
    div = flux.fast_divergence(np.asarray(x_hat, dtype=float), quad.points)
    XVn = np.einsum("qj,qjk,qk->q", quad.points, quad.velocity, quad.normals0)
    return quad.integrate(div * XVn)


def naive_misfit_coefficient(flux: FluxField, geom: CellGeometry, quad: BoundaryQuadrature, x_hat) -> float:
    """Predicted ``(naive - exact) / delta^(p+1)`` as ``delta -> 0``."""
    return discrepancy_term(flux, geom, quad, x_hat) - motion_term(flux, geom, quad, x_hat)


@dataclass(frozen=True)
class Arc:
    geom: CellGeometry
    theta_start: float
    theta_end: float

    def __post_init__(self):
        if not self.theta_end > self.theta_start:
            raise ValueError("degenerate arc: theta_end must exceed theta_start")
        if self.theta_end - self.theta_start > 2 * np.pi + 1e-15:
            raise ValueError("arc longer than the full circle")


def endpoint_term(flux: FluxField, arc: Arc, x_hat) -> float:
    """``GAMMA_SIGN [(X.V) x Q]`` between the end points of the arc."""
    ends = np.array([arc.theta_start, arc.theta_end])
    r_hat = np.stack([np.cos(ends), np.sin(ends)], axis=-1)
    X = CENTER + arc.geom.a * r_hat
    XV = (X @ arc.geom.g)[:, None] * r_hat
    Q = flux.value(np.asarray(x_hat, dtype=float), X)
    c = cross(XV, Q)
    return GAMMA_SIGN * float(c[1] - c[0])


def open_curve_form(flux: FluxField, arc: Arc, x_hat, delta: float, quad: BoundaryQuadrature | None = None, exponent: int = 1) -> float:
    """Correct expansion on an open arc including the end-point contribution."""
    _check_delta(delta)
    quad = quad or arc_quadrature(arc.geom, arc.theta_start, arc.theta_end)
    body = quad.integrate(_correct_integrand(flux, arc.geom, x_hat, delta, quad))
    return delta**exponent * (body + delta * endpoint_term(flux, arc, x_hat))


# -- order studies ----------------------------------------------------------


def fit_slope(deltas, residuals, floor: float = RESIDUAL_FLOOR) -> float:
    """Least-squares slope of ``log residual`` against ``log delta``; tiny residuals dropped."""
    d = np.asarray(deltas, dtype=float)
    r = np.asarray(residuals, dtype=float)
    keep = r > floor
    if keep.sum() < 2:
        return float("inf")
    return float(np.polyfit(np.log(d[keep]), np.log(r[keep]), 1)[0])


@dataclass
class MsIntReport:
    delta_values: np.ndarray
    correct_values: np.ndarray
    naive_values: np.ndarray
    oracle_values: np.ndarray
    correct_residuals: np.ndarray
    naive_residuals: np.ndarray
    fitted_slopes: dict
    discrepancy_term: float
    misfit_prediction: float = float("nan")
    exponent: int = 1
    extra: dict = field(default_factory=dict)

    def misfit_coefficients(self) -> np.ndarray:
        """Measured ``(naive - oracle) / delta^(p+1)`` per delta."""
        d = self.delta_values
        return (self.naive_values - self.oracle_values) / d ** (self.exponent + 1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "correct", "naive", "oracle", "res_correct", "res_naive"])
            for row in zip(self.delta_values, self.correct_values, self.naive_values, self.oracle_values, self.correct_residuals, self.naive_residuals):
                w.writerow([f"{v:.17g}" for v in row])
            s = self.fitted_slopes
            fh.write(f"slope_correct={s['correct']:.6g},slope_naive={s['naive']:.6g},discrepancy={self.discrepancy_term:.17g}\n")


def order_study(
    flux: FluxField,
    a_of_x,
    x_hat,
    delta_values,
    arc: tuple[float, float] | None = None,
    n_quad: int = 1024,
    n_boundary: int = 256,
    exponent: int = 1,
) -> MsIntReport:
    """Compare both expansions with the brute-force oracle over ``delta_values``.

    Residuals are reported inside the bracket, i.e. divided by ``delta^p``,
    so the correct form shows second order and the naive form first order.
    With ``arc=(theta_start, theta_end)`` the open-curve form replaces the
    correct form and the naive form is evaluated on the same arc without
    an end-point term.
    """
    d = np.asarray(delta_values, dtype=float)
    if len(d) < 3:
        raise ValueError("order study needs at least 3 delta values")
    ratios = d[1:] / d[:-1]
    if np.any(ratios >= 1) or np.ptp(ratios) > 1e-9 * ratios.mean():
        raise ValueError("delta values must decrease geometrically")
    a_expr = as_expr(a_of_x)
    geom = CellGeometry.from_expr(a_expr, x_hat)
    if arc is None:
        quad = boundary_quadrature(geom, n_boundary)
        correct = np.array([ms_form_correct(flux, geom, x_hat, t, quad, exponent) for t in d])
        oracle = np.array([brute_force(flux, a_expr, x_hat, t, n_quad, exponent=exponent) for t in d])
    else:
        arc_obj = Arc(geom, *arc)
        quad = arc_quadrature(geom, *arc, n_points=n_boundary)
        correct = np.array([open_curve_form(flux, arc_obj, x_hat, t, quad, exponent) for t in d])
        oracle = np.array([brute_force_arc(flux, a_expr, x_hat, t, *arc, n_quad=max(n_quad // 2, 256), exponent=exponent) for t in d])
    naive = np.array([ms_form_naive(flux, geom, x_hat, t, quad, exponent) for t in d])
    scale = d**exponent
    res_c = np.abs(correct - oracle) / scale
    res_n = np.abs(naive - oracle) / scale
    slopes = {"correct": fit_slope(d, res_c), "naive": fit_slope(d, res_n)}
    return MsIntReport(
        delta_values=d,
        correct_values=correct,
        naive_values=naive,
        oracle_values=oracle,
        correct_residuals=res_c,
        naive_residuals=res_n,
        fitted_slopes=slopes,
        discrepancy_term=discrepancy_term(flux, geom, quad, x_hat),
        misfit_prediction=naive_misfit_coefficient(flux, geom, quad, x_hat) if arc is None else float("nan"),
        exponent=exponent,
    )
