"""Effective permittivity and effective charge from cell solutions.

Two routes for the permittivity tensor:

* volume: ``eps_ij = int_D eps (delta_ij + dPsi_i/dX_j) dX``;
* boundary: ``eps_ij = eps_e (delta_ij + oint_{dD} X_j dPsi_i/dX_k n_k dS)``.

On the periodic cell the boundary integral collapses onto one edge per
direction, because ``X_j`` jumps by one between opposite edges while the
gradient is periodic.  Edge gradients are averaged over the two triangles
(one on each side of the periodic seam) so the edge value is second-order
accurate.

For the large-charge variant the cell quantities

* ``F = int_D eps grad xi dX`` and
* ``G = eps_e oint_{dD} X (grad xi . n) dS + int_{D_e} rho X dX``

are tabulated over the inclusion radius; the effective charge is the slow
divergence of either, ``dF/da . grad a``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.interpolate import PchipInterpolator

from . import fem
from .cellsolve import INFINITE, CellProblemSpec, CellSolution, Mode, solve_cell
from .exprlang import FieldExpr, as_expr
from .geometry import CellGeometry
from .mesh import EXTERIOR, INTERIOR, CellMesh, build_cell_mesh

ISOTROPY_TOL = 1e-4


class Formula(str, Enum):
    VOLUME = "VOLUME"
    BOUNDARY = "BOUNDARY"


class TableMode(str, Enum):
    """Which family of cell problems a table is built from."""

    FINITE = "FINITE"
    LIMIT_NEUMANN = "LIMIT_NEUMANN"
    LIMIT_CONSTRAINT = "LIMIT_CONSTRAINT"

    @property
    def psi_mode(self) -> Mode:
        return Mode("PSI_" + self.value)

    @property
    def xi_mode(self) -> Mode:
        return Mode("XI_" + self.value)


@dataclass(frozen=True)
class EffectiveCoefficients:
    eps_eff: np.ndarray
    formula: Formula
    a: float
    eps_e: float
    eps_i: float = INFINITE

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(0.5 * (self.eps_eff + self.eps_eff.T))

    @property
    def eps_iso(self) -> float:
        return float(np.trace(self.eps_eff) / 2.0)

    def bounds(self) -> tuple[float, float]:
        """Harmonic and arithmetic mean bounds (finite contrast only)."""
        f = math.pi * self.a**2
        if self.eps_i == INFINITE:
            return 1.0 / ((1 - f) / self.eps_e), INFINITE
        return 1.0 / (f / self.eps_i + (1 - f) / self.eps_e), f * self.eps_i + (1 - f) * self.eps_e

    def violations(self, isotropy_tol: float = ISOTROPY_TOL) -> list[str]:
        """Invariant violations; an empty list means the tensor is admissible."""
        out = []
        e = self.eps_eff
        norm = np.linalg.norm(e)
        if abs(e[0, 1] - e[1, 0]) > 1e-8 * norm:
            out.append(f"not symmetric: off-diagonal mismatch {abs(e[0, 1] - e[1, 0]):.3e}")
        lam = self.eigenvalues
        if lam.min() <= 0:
            out.append(f"not positive definite: eigenvalues {lam}")
        if self.eps_i != INFINITE:
            lo, hi = self.bounds()
            if lam.min() < lo * (1 - 1e-12) or lam.max() > hi * (1 + 1e-12):
                out.append(f"eigenvalues {lam} outside bounds [{lo}, {hi}]")
        if abs(lam[1] - lam[0]) > isotropy_tol * lam.max():
            out.append(f"anisotropic: eigenvalues {lam}")
        return out


# -- permittivity ---------------------------------------------------------


def _psi_solution(sol: CellSolution):
    if sol.psi is None:
        raise ValueError(f"need a Psi solution, got mode {sol.spec.mode.value}")
    return sol.psi


def epsilon_volume(sol: CellSolution) -> EffectiveCoefficients:
    """``eps_eff[i] = int_D eps grad(X_i + Psi_i) dX``.

    For the perfect-dielectric modes the inclusion integral is replaced by
    the first moment of the interface reaction of the exterior system, which
    is its exact discrete counterpart.
    """
    psi = _psi_solution(sol)
    spec = sol.spec
    mesh = sol.mesh
    area, _ = fem.triangle_geometry(mesh.vertices, mesh.triangles)
    if not spec.mode.is_limit:
        w = area * np.where(mesh.region == INTERIOR, spec.eps_i, spec.eps_e)
        eps = np.eye(2) * w.sum()
        for i in range(2):
            eps[i] += w @ fem.p1_gradients(mesh.vertices, mesh.triangles, psi[i])
        return EffectiveCoefficients(eps, Formula.VOLUME, mesh.geom.a, spec.eps_e, spec.eps_i)
    ext = mesh.region == EXTERIOR
    tris = mesh.triangles[ext]
    w = spec.eps_e * area[ext]
    K = fem.stiffness(mesh.vertices, tris, np.full(len(tris), spec.eps_e), n=mesh.n_vertices)
    gamma = mesh.interface_vertices
    eps = np.eye(2) * w.sum()
    for i in range(2):
        eps[i] += w @ fem.p1_gradients(mesh.vertices, tris, psi[i])
        b = fem.gradient_load(mesh.vertices, tris, np.full(len(tris), spec.eps_e), np.eye(2)[i], n=mesh.n_vertices)
        eps[i] -= mesh.vertices[gamma].T @ (K @ psi[i] - b)[gamma]
    return EffectiveCoefficients(eps, Formula.VOLUME, mesh.geom.a, spec.eps_e, spec.eps_i)


def _face_pairs(mesh: CellMesh):
    """For faces X1=1 and X2=1: edge lengths and the two triangles sharing each edge."""
    v = mesh.vertices
    mids = v[mesh.outer_edges].mean(axis=1)
    lengths = np.linalg.norm(v[mesh.outer_edges[:, 1]] - v[mesh.outer_edges[:, 0]], axis=1)
    out = []
    for j in range(2):
        far = np.flatnonzero(mids[:, j] == 1.0)
        near = {float(mids[e, 1 - j]): e for e in np.flatnonzero(mids[:, j] == 0.0)}
        try:
            partner = np.array([near[float(mids[e, 1 - j])] for e in far])
        except KeyError as exc:
            raise ValueError("outer edges are not periodic translates") from exc
        out.append((lengths[far], mesh.outer_tri[far], mesh.outer_tri[partner]))
    return out


def face_gradient_integrals(mesh: CellMesh, u: np.ndarray) -> np.ndarray:
    """``M[j] = int_{X_j = 1} grad u dS`` using seam-averaged gradients."""
    grads = fem.p1_gradients(mesh.vertices, mesh.triangles, u)
    M = np.empty((2, 2))
    for j, (length, t1, t2) in enumerate(_face_pairs(mesh)):
        M[j] = length @ (0.5 * (grads[t1] + grads[t2]))
    return M


def epsilon_boundary(sol: CellSolution) -> EffectiveCoefficients:
    psi = _psi_solution(sol)
    spec = sol.spec
    eps = np.eye(2)
    for i in range(2):
        M = face_gradient_integrals(sol.mesh, psi[i])
        for j in range(2):
            eps[i, j] += M[j, j]
    return EffectiveCoefficients(spec.eps_e * eps, Formula.BOUNDARY, sol.mesh.geom.a, spec.eps_e, spec.eps_i)


# -- effective charge -------------------------------------------------------


@lru_cache(maxsize=1)
def _default_average_mesh() -> CellMesh:
    return build_cell_mesh(CellGeometry(0.25), 0.05)


def rho_eff_cell_average(rho, x, mesh: CellMesh | None = None) -> float:
    """Cell average ``int_D rho(x, X) dX`` over both regions of ``mesh``."""
    mesh = mesh or _default_average_mesh()
    rho = as_expr(rho)
    pts, w = fem.quadrature_points(mesh.vertices, mesh.triangles)
    vals = rho.evaluate({"x1": float(x[0]), "x2": float(x[1]), "X1": pts[..., 0], "X2": pts[..., 1]})
    return float(np.sum(w * np.broadcast_to(vals, w.shape)))


def _rho_moment(spec: CellProblemSpec, region: int) -> np.ndarray:
    """``int_{region} rho X dX``."""
    mesh = spec.mesh
    tris = mesh.triangles[mesh.region == region]
    pts, w = fem.quadrature_points(mesh.vertices, tris)
    env = {"X1": pts[..., 0], "X2": pts[..., 1], "x1": spec.x_anchor[0], "x2": spec.x_anchor[1]}
    vals = np.broadcast_to(spec.rho.evaluate(env), w.shape)
    return np.array([np.sum(w * vals * pts[..., k]) for k in range(2)])


def _xi_solution(sol: CellSolution) -> np.ndarray:
    if sol.xi is None:
        raise ValueError(f"need a xi solution, got mode {sol.spec.mode.value}")
    return sol.xi


def xi_flux_volume(sol: CellSolution) -> np.ndarray:
    """``F = int_D eps grad xi dX``.

    In the perfect-dielectric limit the inclusion flux is finite but not
    resolved by the field; its integral is recovered from the interface
    reaction of the exterior system plus the charge moment of the inclusion.
    """
    xi = _xi_solution(sol)
    spec = sol.spec
    mesh = sol.mesh
    area, _ = fem.triangle_geometry(mesh.vertices, mesh.triangles)
    grads = fem.p1_gradients(mesh.vertices, mesh.triangles, xi)
    if not spec.mode.is_limit:
        w = area * np.where(mesh.region == INTERIOR, spec.eps_i, spec.eps_e)
        return w @ grads
    ext = mesh.region == EXTERIOR
    F = spec.eps_e * (area[ext] @ grads[ext])
    tris = mesh.triangles[ext]
    K = fem.stiffness(mesh.vertices, tris, np.full(len(tris), spec.eps_e), n=mesh.n_vertices)
    pts, _ = fem.quadrature_points(mesh.vertices, tris)
    env = {"X1": pts[..., 0], "X2": pts[..., 1], "x1": spec.x_anchor[0], "x2": spec.x_anchor[1]}
    b = fem.source_load(mesh.vertices, tris, np.broadcast_to(spec.rho.evaluate(env), pts.shape[:2]), n=mesh.n_vertices)
    gamma = mesh.interface_vertices
    reaction = (K @ xi - b)[gamma]
    # oint_{dD_i} X eps_e dxi/dn0 dS = -sum_Gamma X(a) r_a
    F -= mesh.vertices[gamma].T @ reaction
    F += _rho_moment(spec, INTERIOR)
    return F


def xi_flux_boundary(sol: CellSolution) -> np.ndarray:
    """``G = eps_e oint_{dD} X (grad xi . n) dS + int_{D_e} rho X dX``."""
    xi = _xi_solution(sol)
    M = face_gradient_integrals(sol.mesh, xi)
    return sol.spec.eps_e * np.diag(M) + _rho_moment(sol.spec, EXTERIOR)


# -- tables -------------------------------------------------------------------


@dataclass
class EffectiveTable:
    a_values: np.ndarray
    eps_iso: np.ndarray
    F: np.ndarray  # (n, 2)
    G: np.ndarray  # (n, 2)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.a_values = np.asarray(self.a_values, dtype=float)
        self.eps_iso = np.asarray(self.eps_iso, dtype=float)
        self.F = np.asarray(self.F, dtype=float).reshape(-1, 2)
        self.G = np.asarray(self.G, dtype=float).reshape(-1, 2)
        if len(self.a_values) < 3:
            raise ValueError("table needs at least 3 radii")
        if np.any(np.diff(self.a_values) <= 0):
            raise ValueError("table radii must be strictly increasing")
        self._eps = PchipInterpolator(self.a_values, self.eps_iso, extrapolate=False)

    @property
    def a_range(self) -> tuple[float, float]:
        return float(self.a_values[0]), float(self.a_values[-1])

    @property
    def spacing(self) -> float:
        return float(np.max(np.diff(self.a_values)))

    def _check(self, a):
        a = np.asarray(a, dtype=float)
        lo, hi = self.a_range
        if np.any(a < lo) or np.any(a > hi):
            raise ValueError(f"radius outside table range [{lo}, {hi}]")
        return a

    def eps_at(self, a):
        return self._eps(self._check(a))

    def _linear(self, values, a):
        a = self._check(a)
        return np.stack([np.interp(a, self.a_values, values[:, k]) for k in range(2)], axis=-1)

    def F_at(self, a):
        return self._linear(self.F, a)

    def G_at(self, a):
        return self._linear(self.G, a)

    def derivatives(self, a):
        """Central differences ``(dF/da, dG/da)`` with step equal to the table spacing."""
        a = np.asarray(a, dtype=float)
        h = self.spacing
        lo, hi = self.a_range
        if np.any(a - h < lo - 1e-12) or np.any(a + h > hi + 1e-12):
            raise ValueError(f"radius must lie one table step inside [{lo}, {hi}]")
        ap, am = np.minimum(a + h, hi), np.maximum(a - h, lo)
        dF = (self.F_at(ap) - self.F_at(am)) / (2 * h)
        dG = (self.G_at(ap) - self.G_at(am)) / (2 * h)
        return dF, dG

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "eps_iso", "F1", "F2", "G1", "G2"])
            for a, e, F, G in zip(self.a_values, self.eps_iso, self.F, self.G):
                w.writerow([f"{v:.17g}" for v in (a, e, *F, *G)])

    @classmethod
    def from_csv(cls, path) -> "EffectiveTable":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2:4], data[:, 4:6])


@dataclass(frozen=True)
class RhoEff:
    """Effective charge by the volume-flux route and by the boundary route."""

    flux_form: float
    boundary_form: float

    def __float__(self) -> float:
        return self.flux_form


def rho_eff_flux_divergence(table: EffectiveTable, a_of_x, x) -> RhoEff:
    """``rho_eff = dF/da . grad a`` (and the same for G), by the chain rule."""
    from .exprlang import gradient_fd

    a_expr = as_expr(a_of_x)
    env = {"x1": float(x[0]), "x2": float(x[1])}
    a = a_expr.evaluate(env)
    grad = np.array([gradient_fd(a_expr, "x1", env), gradient_fd(a_expr, "x2", env)])
    dF, dG = table.derivatives(a)
    return RhoEff(float(dF @ grad), float(dG @ grad))


def cell_coefficients(a: float, target_h: float, mode: TableMode, eps_e: float = 1.0, eps_i: float = INFINITE, rho=None):
    """Solve the cell problems for one radius; returns ``(coefficients, F, G)``."""
    mode = TableMode(mode)
    mesh = build_cell_mesh(CellGeometry(a), target_h)
    ei = eps_i if mode is TableMode.FINITE else INFINITE
    psi = solve_cell(CellProblemSpec(mesh, mode.psi_mode, eps_e, ei))
    coeffs = epsilon_volume(psi) if mode is TableMode.FINITE else epsilon_boundary(psi)
    F = G = np.zeros(2)
    if rho is not None:
        xi = solve_cell(CellProblemSpec(mesh, mode.xi_mode, eps_e, ei, rho=rho))
        F, G = xi_flux_volume(xi), xi_flux_boundary(xi)
    return coeffs, F, G


def build_effective_table(
    a_values,
    eps_e: float = 1.0,
    mode: TableMode | str = TableMode.LIMIT_CONSTRAINT,
    rho: FieldExpr | str | None = None,
    eps_i: float = INFINITE,
    target_h: float = 0.02,
    executor=None,
) -> EffectiveTable:
    """Tabulate ``eps_iso`` and the charge fluxes over the radii ``a_values``.

    ``rho`` must not depend on the slow variables: the tabulated cell fluxes
    are functions of the radius alone.  ``executor`` (a
    ``concurrent.futures`` executor) parallelises over radii.
    """
    a_values = np.asarray(a_values, dtype=float)
    if len(a_values) < 5:
        raise ValueError("table needs at least 5 radii")
    if np.any(np.diff(a_values) <= 0):
        raise ValueError("table radii must be strictly increasing without duplicates")
    if np.any(a_values <= 0.02) or np.any(a_values >= 0.45):
        raise ValueError("table radii must lie in (0.02, 0.45)")
    mode = TableMode(mode)
    if rho is not None:
        rho = as_expr(rho)
        if rho.variables & {"x1", "x2"}:
            raise ValueError("tabulated charge density must depend on X1, X2 only")

    def one(a):
        try:
            return cell_coefficients(a, target_h, mode, eps_e, eps_i, rho)
        except Exception as exc:
            raise type(exc)(f"a={float(a)!r}: {exc}") from exc

    results = list(executor.map(one, a_values)) if executor else [one(a) for a in a_values]
    eps_iso, F, G = [], [], []
    for a, (coeffs, f, g) in zip(a_values, results):
        bad = coeffs.violations()
        if bad:
            raise ValueError(f"a={a!r}: " + "; ".join(bad))
        eps_iso.append(coeffs.eps_iso)
        F.append(f)
        G.append(g)
    meta = {"mode": mode.value, "eps_e": eps_e, "eps_i": eps_i, "target_h": target_h, "rho": str(rho) if rho else None}
    return EffectiveTable(a_values, eps_iso, F, G, meta)
