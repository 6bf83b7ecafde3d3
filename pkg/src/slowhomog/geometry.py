"""Level-set geometry of a circular inclusion with slowly varying radius.

The unit cell is ``[0, 1]^2`` in fast coordinates with the inclusion centred
at ``(0.5, 0.5)``.  The level set is ``h(x, X) = |X - c| - a(x)``, so that
``grad_X h = r_hat`` (unit length) and ``grad_x h = -grad a``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exprlang import FieldExpr, as_expr, gradient_fd

CENTER = np.array([0.5, 0.5])


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CellGeometry:
    """Inclusion radius ``a`` (fraction of the cell side) and its slow gradient."""

    a: float
    grad_a: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = field(default=(0.5, 0.5), init=False)

    def __post_init__(self):
        if not 0.0 < self.a < 0.5:
            raise GeometryError(f"inclusion radius a={self.a!r} outside (0, 0.5)")
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "grad_a", (float(self.grad_a[0]), float(self.grad_a[1])))

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.grad_a)

    @property
    def inclusion_area(self) -> float:
        return np.pi * self.a**2

    @classmethod
    def from_expr(cls, a_of_x, x_hat, step: float = 1e-5) -> "CellGeometry":
        """Geometry of the cell anchored at the macroscale point ``x_hat``."""
        a_expr = as_expr(a_of_x)
        env = {"x1": float(x_hat[0]), "x2": float(x_hat[1])}
        grad = (gradient_fd(a_expr, "x1", env, step), gradient_fd(a_expr, "x2", env, step))
        return cls(float(a_expr.evaluate(env)), grad)


def level_set(geom: CellGeometry, X) -> np.ndarray | float:
    """``|X - c| - a``: negative inside the inclusion, positive outside."""
    X = np.asarray(X, dtype=float)
    value = np.linalg.norm(X - CENTER, axis=-1) - geom.a
    return float(value) if value.ndim == 0 else value


def _radial(X) -> np.ndarray:
    d = np.asarray(X, dtype=float) - CENTER
    r = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(r == 0.0):
        raise GeometryError("normal undefined at the inclusion centre")
    return d / r


def normal0(geom: CellGeometry, X) -> np.ndarray:
    """Leading-order outward normal ``grad_X h / |grad_X h|``."""
    return _radial(X)


def normal1(geom: CellGeometry, X) -> np.ndarray:
    """First correction to the normal: the tangential part of ``-grad a``.

    Specialises ``grad_x h/|grad_X h| - (grad_x h . grad_X h) grad_X h/|grad_X h|^3``
    with ``grad_x h = -grad a`` and ``|grad_X h| = 1``.
    """
    r = _radial(X)
    g = geom.g
    return -g + (r @ g)[..., None] * r


def boundary_velocity(geom: CellGeometry, X) -> np.ndarray:
    """Slow derivative of boundary position, ``V[j, k] = dR_k/dx_j = g_j r_k``."""
    r = _radial(X)
    return geom.g[:, None] * r[..., None, :]


@dataclass(frozen=True)
class BoundaryQuadrature:
    """Equal-arc trapezoid rule on the inclusion boundary."""

    theta: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    normals0: np.ndarray
    normals1: np.ndarray
    velocity: np.ndarray

    def integrate(self, values) -> np.ndarray | float:
        values = np.asarray(values, dtype=float)
        out = np.tensordot(self.weights, values, axes=(0, 0))
        return float(out) if np.ndim(out) == 0 else out


def _quadrature_at(geom: CellGeometry, theta, weights) -> BoundaryQuadrature:
    r_hat = np.column_stack([np.cos(theta), np.sin(theta)])
    points = CENTER + geom.a * r_hat
    return BoundaryQuadrature(
        theta=theta,
        points=points,
        weights=weights,
        normals0=r_hat,
        normals1=-geom.g + (r_hat @ geom.g)[:, None] * r_hat,
        velocity=geom.g[None, :, None] * r_hat[:, None, :],
    )


def boundary_quadrature(geom: CellGeometry, n_points: int, offset: float = 0.0) -> BoundaryQuadrature:
    """``n_points`` equally spaced nodes, each with weight ``2 pi a / n``.

    Spectrally accurate for smooth periodic integrands.
    """
    if n_points < 4:
        raise ValueError("need at least 4 quadrature points")
    theta = offset + 2.0 * np.pi * np.arange(n_points) / n_points
    weights = np.full(n_points, 2.0 * np.pi * geom.a / n_points)
    return _quadrature_at(geom, theta, weights)


def arc_quadrature(geom: CellGeometry, theta_start: float, theta_end: float, n_points: int = 128) -> BoundaryQuadrature:
    """Gauss-Legendre rule on the arc ``theta_start <= theta <= theta_end``."""
    if not theta_end > theta_start:
        raise GeometryError("degenerate arc: theta_end must exceed theta_start")
    nodes, w = np.polynomial.legendre.leggauss(n_points)
    half = 0.5 * (theta_end - theta_start)
    theta = theta_start + half * (nodes + 1.0)
    return _quadrature_at(geom, theta, w * half * geom.a)


# -- smooth-geometry quadrature (used for transport-theorem checks) ------


def disk_integral(geom: CellGeometry, f, n_radial: int = 32, n_theta: int = 128) -> float:
    """Integral of ``f(X1, X2)`` over the exact disk, polar Gauss x trapezoid."""
    nodes, w = np.polynomial.legendre.leggauss(n_radial)
    r = 0.5 * geom.a * (nodes + 1.0)
    wr = 0.5 * geom.a * w * r
    theta = 2.0 * np.pi * np.arange(n_theta) / n_theta
    R, T = np.meshgrid(r, theta, indexing="ij")
    X1 = CENTER[0] + R * np.cos(T)
    X2 = CENTER[1] + R * np.sin(T)
    vals = _call(f, X1, X2)
    return float(np.sum(wr[:, None] * vals) * 2.0 * np.pi / n_theta)


def cell_integral(f, n: int = 32) -> float:
    """Integral of ``f(X1, X2)`` over the unit square, tensor Gauss-Legendre."""
    nodes, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (nodes + 1.0)
    w = 0.5 * w
    X1, X2 = np.meshgrid(t, t, indexing="ij")
    return float(np.sum(np.outer(w, w) * _call(f, X1, X2)))


def exterior_integral(geom: CellGeometry, f, **kwargs) -> float:
    return cell_integral(f) - disk_integral(geom, f, **kwargs)


def _call(f, X1, X2):
    if isinstance(f, FieldExpr):
        return np.broadcast_to(f.evaluate({"X1": X1, "X2": X2}), X1.shape)
    return np.broadcast_to(np.asarray(f(X1, X2), dtype=float), X1.shape)
