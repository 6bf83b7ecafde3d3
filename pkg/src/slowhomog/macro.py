"""Homogenised macroscale problem on the unit square.

``div(eps_eff(a(x)) grad phi0) = -rho_eff(x)`` with ``phi0 = g`` on the
boundary, discretised by cell-centred finite volumes: unknowns at the centres
of a uniform ``n x n`` grid, harmonic means of the two cell coefficients on
interior faces, and a ghost value ``2 g - u`` across boundary faces.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from . import fem
from .effective import EffectiveTable, _default_average_mesh
from .exprlang import FieldExpr, as_expr, gradient_fd


class RhoMode(str, Enum):
    CELL_AVERAGE = "CELL_AVERAGE"
    FLUX_DIVERGENCE = "FLUX_DIVERGENCE"


class MacroError(RuntimeError):
    pass


@dataclass(frozen=True)
class MacroProblem:
    a_of_x: FieldExpr
    table: EffectiveTable
    rho: FieldExpr
    boundary_value: FieldExpr
    rho_mode: RhoMode = RhoMode.CELL_AVERAGE
    grid_n: int = 64

    def __post_init__(self):
        for name in ("a_of_x", "rho", "boundary_value"):
            object.__setattr__(self, name, as_expr(getattr(self, name)))
        object.__setattr__(self, "rho_mode", RhoMode(self.rho_mode))
        if self.grid_n < 8:
            raise ValueError("grid_n must be at least 8")
        self.check_range()

    def check_range(self, samples: int = 64) -> None:
        t = (np.arange(samples) + 0.5) / samples
        X1, X2 = np.meshgrid(t, t, indexing="ij")
        a = np.broadcast_to(self.a_of_x.evaluate({"x1": X1, "x2": X2}), X1.shape)
        lo, hi = self.table.a_range
        if self.rho_mode is RhoMode.FLUX_DIVERGENCE:
            lo, hi = lo + self.table.spacing, hi - self.table.spacing
        if a.min() < lo - 1e-12 or a.max() > hi + 1e-12:
            raise MacroError(f"a(x) takes values in [{a.min():.6g}, {a.max():.6g}], outside usable table range [{lo:.6g}, {hi:.6g}]")

    @property
    def h(self) -> float:
        return 1.0 / self.grid_n

    def centres(self):
        t = (np.arange(self.grid_n) + 0.5) * self.h
        return np.meshgrid(t, t, indexing="ij")


@dataclass
class MacroSolution:
    problem: MacroProblem
    phi: np.ndarray  # (n, n) cell-centre values
    eps_eff: np.ndarray  # (n, n)
    rho_eff: np.ndarray  # (n, n)
    iterations: int = 0

    def boundary_flux(self) -> float:
        """Net flux ``oint eps grad phi . n`` leaving the domain."""
        p = self.problem
        h = p.h
        t = (np.arange(p.grid_n) + 0.5) * h
        g = p.boundary_value
        total = 0.0
        for side, (x1, x2), vals, eps in (
            ("left", (0.0 * t, t), self.phi[0, :], self.eps_eff[0, :]),
            ("right", (1.0 + 0.0 * t, t), self.phi[-1, :], self.eps_eff[-1, :]),
            ("bottom", (t, 0.0 * t), self.phi[:, 0], self.eps_eff[:, 0]),
            ("top", (t, 1.0 + 0.0 * t), self.phi[:, -1], self.eps_eff[:, -1]),
        ):
            gb = np.broadcast_to(g.evaluate({"x1": x1, "x2": x2}), t.shape)
            total += np.sum(eps * (gb - vals) / (h / 2)) * h
        return float(total)

    def interpolator(self) -> RegularGridInterpolator:
        """Bilinear interpolant using cell centres plus boundary data."""
        p = self.problem
        n = p.grid_n
        t = np.concatenate([[0.0], (np.arange(n) + 0.5) * p.h, [1.0]])
        T1, T2 = np.meshgrid(t, t, indexing="ij")
        vals = np.broadcast_to(p.boundary_value.evaluate({"x1": T1, "x2": T2}), T1.shape).copy()
        vals[1:-1, 1:-1] = self.phi
        return RegularGridInterpolator((t, t), vals)

    def at(self, points) -> np.ndarray:
        return self.interpolator()(np.asarray(points, dtype=float))

    def to_csv(self, path) -> None:
        X1, X2 = self.problem.centres()
        _write(path, ["x1", "x2", "phi0"], zip(X1.ravel(), X2.ravel(), self.phi.ravel()))

    def coefficients_to_csv(self, path) -> None:
        X1, X2 = self.problem.centres()
        _write(path, ["x1", "x2", "eps_eff", "rho_eff"], zip(X1.ravel(), X2.ravel(), self.eps_eff.ravel(), self.rho_eff.ravel()))


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" for v in row])


def _cell_average_field(rho: FieldExpr, X1, X2, chunk: int = 256) -> np.ndarray:
    if not rho.variables & {"X1", "X2"}:
        return np.broadcast_to(rho.evaluate({"x1": X1, "x2": X2}), X1.shape).copy()
    mesh = _default_average_mesh()
    pts, w = fem.quadrature_points(mesh.vertices, mesh.triangles)
    x1, x2 = X1.ravel(), X2.ravel()
    out = np.empty(len(x1))
    for s in range(0, len(x1), chunk):
        sl = slice(s, s + chunk)
        vals = rho.evaluate({"x1": x1[sl, None, None], "x2": x2[sl, None, None], "X1": pts[None, ..., 0], "X2": pts[None, ..., 1]})
        out[sl] = np.sum(np.broadcast_to(vals, (len(x1[sl]),) + w.shape) * w, axis=(1, 2))
    return out.reshape(X1.shape)


def coefficient_field(problem: MacroProblem):
    """``(eps_eff, rho_eff)`` at the cell centres."""
    X1, X2 = problem.centres()
    env = {"x1": X1, "x2": X2}
    a = np.broadcast_to(problem.a_of_x.evaluate(env), X1.shape)
    eps = problem.table.eps_at(a)
    if problem.rho_mode is RhoMode.CELL_AVERAGE:
        rho = _cell_average_field(problem.rho, X1, X2)
    else:
        grad = np.stack([np.broadcast_to(gradient_fd(problem.a_of_x, v, env), X1.shape) for v in ("x1", "x2")], axis=-1)
        dF, _ = problem.table.derivatives(a)
        rho = np.einsum("...k,...k->...", dF, grad)
    return np.asarray(eps, dtype=float), rho


def assemble(eps: np.ndarray, h: float):
    """Finite-volume matrix for ``-div(eps grad u)`` multiplied by the cell area.

    Boundary faces contribute ``2 eps`` to the diagonal; the matching Dirichlet
    data enter the right-hand side.
    """
    n = eps.shape[0]
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, vals = [], [], []
    diag = np.zeros((n, n))
    for axis in (0, 1):
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        e1, e2 = eps[tuple(lo)], eps[tuple(hi)]
        face = 2.0 * e1 * e2 / (e1 + e2)
        i1, i2 = idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()
        rows += [i1, i2]
        cols += [i2, i1]
        vals += [-face.ravel(), -face.ravel()]
        diag[tuple(lo)] += face
        diag[tuple(hi)] += face
    # boundary faces: distance h/2 to the wall
    wall = np.zeros((n, n))
    wall[0, :] += 2 * eps[0, :]
    wall[-1, :] += 2 * eps[-1, :]
    wall[:, 0] += 2 * eps[:, 0]
    wall[:, -1] += 2 * eps[:, -1]
    diag += wall
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n))
    return A


def _dirichlet_rhs(eps, g: FieldExpr, h) -> np.ndarray:
    n = eps.shape[0]
    t = (np.arange(n) + 0.5) * h
    ev = lambda x1, x2: np.broadcast_to(g.evaluate({"x1": x1, "x2": x2}), t.shape)
    b = np.zeros((n, n))
    b[0, :] += 2 * eps[0, :] * ev(0 * t, t)
    b[-1, :] += 2 * eps[-1, :] * ev(0 * t + 1, t)
    b[:, 0] += 2 * eps[:, 0] * ev(t, 0 * t)
    b[:, -1] += 2 * eps[:, -1] * ev(t, 0 * t + 1)
    return b


def solve_with_coefficients(problem: MacroProblem, eps: np.ndarray, rho: np.ndarray, rtol: float = 1e-11) -> MacroSolution:
    h = problem.h
    A = assemble(eps, h)
    b = (rho * h * h + _dirichlet_rhs(eps, problem.boundary_value, h)).ravel()
    try:
        u, its = fem.pcg(A, b, rtol=rtol)
    except fem.SolverError as exc:
        raise MacroError(f"macroscale solve failed: {exc}") from exc
    n = problem.grid_n
    return MacroSolution(problem, u.reshape(n, n), eps, rho, its)


def solve_homogenized(problem: MacroProblem) -> MacroSolution:
    eps, rho = coefficient_field(problem)
    return solve_with_coefficients(problem, eps, rho)
