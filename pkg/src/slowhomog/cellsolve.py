"""Finite-element solution of the periodic cell problems.

Six problems are supported:

``PSI_FINITE``
    ``div(eps (grad Psi_k + e_k)) = 0`` on the whole cell, flux continuity
    across the interface (natural in the weak form).
``PSI_LIMIT_NEUMANN``
    Perfect-dielectric limit reached through the inclusion: the inclusion
    problem ``lap Psi_k = 0`` with ``n0.(grad Psi_k + e_k) = 0`` on its
    inner side is solved first (its solution is ``-X_k + const``), and the
    exterior harmonic problem then takes that trace as Dirichlet data.
``PSI_LIMIT_CONSTRAINT``
    ``Psi_k = -X_k + c_k`` imposed in the inclusion with ``c_k`` an extra
    unknown, closed by the net-flux constraint on the inclusion boundary.
``XI_FINITE``, ``XI_LIMIT_NEUMANN``, ``XI_LIMIT_CONSTRAINT``
    The charge problem ``div(eps grad xi) = -rho`` in the same three forms.

Periodicity is imposed by identifying paired vertices; every field is
normalised to zero cell mean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp

from . import fem
from .exprlang import FieldExpr, as_expr
from .mesh import EXTERIOR, INTERIOR, CellMesh

INFINITE = math.inf
COMPATIBILITY_TOL = 1e-8


class Mode(str, Enum):
    PSI_FINITE = "PSI_FINITE"
    PSI_LIMIT_NEUMANN = "PSI_LIMIT_NEUMANN"
    PSI_LIMIT_CONSTRAINT = "PSI_LIMIT_CONSTRAINT"
    XI_FINITE = "XI_FINITE"
    XI_LIMIT_NEUMANN = "XI_LIMIT_NEUMANN"
    XI_LIMIT_CONSTRAINT = "XI_LIMIT_CONSTRAINT"

    @property
    def is_limit(self) -> bool:
        return "LIMIT" in self.value

    @property
    def is_xi(self) -> bool:
        return self.value.startswith("XI")


class CellProblemError(RuntimeError):
    pass


class CompatibilityError(CellProblemError):
    def __init__(self, integral: float, what: str = "int_D rho dX"):
        self.integral = integral
        super().__init__(f"compatibility violated: {what} = {integral:.3e} (must vanish)")


@dataclass(frozen=True)
class CellProblemSpec:
    mesh: CellMesh
    mode: Mode
    eps_e: float = 1.0
    eps_i: float = INFINITE
    rho: FieldExpr | str | None = None
    x_anchor: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        mode = Mode(self.mode)
        object.__setattr__(self, "mode", mode)
        if not self.eps_e > 0:
            raise ValueError("eps_e must be positive")
        if mode.is_limit != (self.eps_i == INFINITE):
            raise ValueError(f"eps_i={self.eps_i!r} inconsistent with mode {mode.value}")
        if not mode.is_limit and not self.eps_i > 0:
            raise ValueError("eps_i must be positive")
        if self.rho is not None:
            object.__setattr__(self, "rho", as_expr(self.rho))
        elif mode.is_xi:
            raise ValueError("XI modes need a charge density rho")


@dataclass
class CellSolution:
    spec: CellProblemSpec
    psi: np.ndarray | None = None  # (2, nv)
    xi: np.ndarray | None = None  # (nv,)
    inclusion_constants: np.ndarray | None = None
    flux_residual: np.ndarray | None = None
    residual: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def mesh(self) -> CellMesh:
        return self.spec.mesh

    @property
    def fields(self) -> list[np.ndarray]:
        out = [] if self.psi is None else list(self.psi)
        return out if self.xi is None else out + [self.xi]


# -- helpers ------------------------------------------------------------


def _coefficients(mesh: CellMesh, eps_e, eps_i) -> np.ndarray:
    return np.where(mesh.region == INTERIOR, eps_i, eps_e).astype(float)


def _reduction(mesh: CellMesh, vertex_mask=None, extra_mask=None):
    """Prolongation from reduced unknowns to vertex values.

    Vertices in ``vertex_mask`` get periodic dofs; vertices in ``extra_mask``
    all share one extra unknown appended last.
    """
    nv = mesh.n_vertices
    master = mesh.master()
    if vertex_mask is None:
        vertex_mask = np.ones(nv, dtype=bool)
    keep = np.flatnonzero(vertex_mask)
    uniq, dof = np.unique(master[keep], return_inverse=True)
    nd = len(uniq)
    rows, cols = [keep], [dof.ravel()]
    if extra_mask is not None:
        ex = np.flatnonzero(extra_mask)
        rows.append(ex)
        cols.append(np.full(len(ex), nd))
        nd += 1
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nd))


def _zero_mean(mesh: CellMesh, u: np.ndarray) -> tuple[np.ndarray, float]:
    mean = fem.integrate_p1(mesh.vertices, mesh.triangles, u)  # cell area is 1
    return u - mean, mean


def _solve(A, rhs, nullspace=None, rtol=1e-12):
    try:
        u, its = fem.pcg(A, rhs, rtol=rtol, nullspace=nullspace)
    except fem.SolverError as exc:
        raise CellProblemError(f"cell solve failed: {exc}") from exc
    r = rhs - A @ u
    if nullspace is not None:
        r -= nullspace * (nullspace @ r) / (nullspace @ nullspace)
    rel = np.linalg.norm(r) / max(np.linalg.norm(rhs), 1e-300)
    return u, its, float(rel)


def _rho_at_quadrature(spec: CellProblemSpec, triangles) -> np.ndarray:
    pts, _ = fem.quadrature_points(spec.mesh.vertices, triangles)
    env = {"X1": pts[..., 0], "X2": pts[..., 1], "x1": spec.x_anchor[0], "x2": spec.x_anchor[1]}
    return np.broadcast_to(spec.rho.evaluate(env), pts.shape[:2])


def rho_integral(spec: CellProblemSpec, region: int | None = None) -> float:
    mesh = spec.mesh
    tris = mesh.triangles if region is None else mesh.triangles[mesh.region == region]
    return fem.integrate_qp(mesh.vertices, tris, _rho_at_quadrature(spec, tris))


def _check_compatibility(spec: CellProblemSpec):
    total = rho_integral(spec)
    if abs(total) > COMPATIBILITY_TOL:
        raise CompatibilityError(total)
    return total


def _inclusion_masks(mesh: CellMesh):
    nv = mesh.n_vertices
    closed = np.zeros(nv, dtype=bool)
    closed[mesh.interior_vertices] = True
    return closed, ~closed


# -- Psi ----------------------------------------------------------------


def solve_psi_finite(spec: CellProblemSpec) -> CellSolution:
    if spec.mode is not Mode.PSI_FINITE:
        raise ValueError("solve_psi_finite needs mode PSI_FINITE")
    mesh = spec.mesh
    coef = _coefficients(mesh, spec.eps_e, spec.eps_i)
    K = fem.stiffness(mesh.vertices, mesh.triangles, coef)
    P = _reduction(mesh)
    A = (P.T @ K @ P).tocsr()
    ones = np.ones(A.shape[0])
    psi = np.empty((2, mesh.n_vertices))
    res, its = [], []
    for k in range(2):
        b = P.T @ fem.gradient_load(mesh.vertices, mesh.triangles, coef, np.eye(2)[k])
        if abs(b.sum()) > 1e-10 * (np.abs(b).sum() + coef.max()):
            raise CompatibilityError(float(b.sum()), "load sum")
        u, it, r = _solve(A, b, nullspace=ones)
        psi[k] = _zero_mean(mesh, P @ u)[0]
        res.append(r)
        its.append(it)
    return CellSolution(spec, psi=psi, residual=max(res), info={"iterations": its})


def _exterior_system(mesh: CellMesh, eps_e):
    ext = mesh.triangles[mesh.region == EXTERIOR]
    Ke = fem.stiffness(mesh.vertices, ext, np.full(len(ext), eps_e), n=mesh.n_vertices)
    return ext, Ke


def _interface_flux(mesh, Ke, full, b_e) -> float:
    """Net discrete flux ``sum_{a on interface} (K u - b)_a``."""
    r = Ke @ full - b_e
    return float(r[mesh.interface_vertices].sum())


def solve_psi_limit_constraint(spec: CellProblemSpec) -> CellSolution:
    if spec.mode is not Mode.PSI_LIMIT_CONSTRAINT:
        raise ValueError("solve_psi_limit_constraint needs mode PSI_LIMIT_CONSTRAINT")
    mesh = spec.mesh
    ext, Ke = _exterior_system(mesh, spec.eps_e)
    closed, free = _inclusion_masks(mesh)
    P = _reduction(mesh, free, closed)
    A = (P.T @ Ke @ P).tocsr()
    ones = np.ones(A.shape[0])
    psi = np.empty((2, mesh.n_vertices))
    consts, flux, res, its = np.empty(2), np.empty(2), [], []
    for k in range(2):
        lift = np.where(closed, -mesh.vertices[:, k], 0.0)
        b_e = fem.gradient_load(mesh.vertices, ext, np.full(len(ext), spec.eps_e), np.eye(2)[k])
        rhs = P.T @ (b_e - Ke @ lift)
        u, it, r = _solve(A, rhs, nullspace=ones)
        full, _ = _zero_mean(mesh, lift + P @ u)
        psi[k] = full
        consts[k] = float(np.mean(full[closed] + mesh.vertices[closed, k]))
        flux[k] = _interface_flux(mesh, Ke, full, b_e)
        res.append(r)
        its.append(it)
    return CellSolution(spec, psi=psi, inclusion_constants=consts, flux_residual=flux, residual=max(res), info={"iterations": its})


def _inclusion_neumann(mesh: CellMesh, direction=None):
    """Pure-Neumann Laplace problem on the inclusion; returns vertex values on it.

    ``direction`` gives the data ``n0.(grad u + direction) = 0``; ``None``
    means homogeneous data.
    """
    tris_global = mesh.triangles[mesh.region == INTERIOR]
    verts = np.unique(tris_global)
    local = np.full(mesh.n_vertices, -1)
    local[verts] = np.arange(len(verts))
    tris = local[tris_global]
    xy = mesh.vertices[verts]
    K = fem.stiffness(xy, tris, np.ones(len(tris)))
    b = np.zeros(len(verts)) if direction is None else fem.gradient_load(xy, tris, np.ones(len(tris)), direction)
    u, _, _ = _solve(K, b, nullspace=np.ones(len(verts)))
    return verts, u


def _exterior_dirichlet(mesh, Ke, b_e, closed, free, trace):
    P = _reduction(mesh, free)
    A = (P.T @ Ke @ P).tocsr()
    lift = np.where(closed, trace, 0.0)
    rhs = P.T @ (b_e - Ke @ lift)
    u, it, r = _solve(A, rhs)
    return lift + P @ u, it, r


def solve_psi_limit_neumann(spec: CellProblemSpec) -> CellSolution:
    if spec.mode is not Mode.PSI_LIMIT_NEUMANN:
        raise ValueError("solve_psi_limit_neumann needs mode PSI_LIMIT_NEUMANN")
    mesh = spec.mesh
    normals = mesh.interface_normals
    lengths = np.linalg.norm(np.diff(mesh.vertices[mesh.interface_edges], axis=1)[:, 0], axis=1)
    compat = normals.T @ lengths
    if np.abs(compat).max() > 1e-12:
        raise CompatibilityError(float(np.abs(compat).max()), "closed-curve integral of n0")
    ext, Ke = _exterior_system(mesh, spec.eps_e)
    closed, free = _inclusion_masks(mesh)
    psi = np.empty((2, mesh.n_vertices))
    consts, fit, flux, res, its = np.empty(2), np.empty(2), np.empty(2), [], []
    for k in range(2):
        verts, u_in = _inclusion_neumann(mesh, np.eye(2)[k])
        # least-squares constant of u_in = -X_k + c
        shifted = u_in + mesh.vertices[verts, k]
        c = float(shifted.mean())
        fit[k] = float(np.abs(shifted - c).max())
        trace = np.zeros(mesh.n_vertices)
        trace[verts] = -mesh.vertices[verts, k] + c
        b_e = fem.gradient_load(mesh.vertices, ext, np.full(len(ext), spec.eps_e), np.eye(2)[k])
        full, it, r = _exterior_dirichlet(mesh, Ke, b_e, closed, free, trace)
        full, mean = _zero_mean(mesh, full)
        psi[k] = full
        consts[k] = c - mean
        flux[k] = _interface_flux(mesh, Ke, full, b_e)
        res.append(r)
        its.append(it)
    return CellSolution(
        spec, psi=psi, inclusion_constants=consts, flux_residual=flux, residual=max(res),
        info={"iterations": its, "inclusion_fit_error": fit},
    )


# -- xi -----------------------------------------------------------------


def solve_xi_finite(spec: CellProblemSpec) -> CellSolution:
    if spec.mode is not Mode.XI_FINITE:
        raise ValueError("solve_xi_finite needs mode XI_FINITE")
    mesh = spec.mesh
    total = _check_compatibility(spec)
    coef = _coefficients(mesh, spec.eps_e, spec.eps_i)
    K = fem.stiffness(mesh.vertices, mesh.triangles, coef)
    P = _reduction(mesh)
    A = (P.T @ K @ P).tocsr()
    b = P.T @ fem.source_load(mesh.vertices, mesh.triangles, _rho_at_quadrature(spec, mesh.triangles))
    u, it, r = _solve(A, b, nullspace=np.ones(A.shape[0]))
    xi, _ = _zero_mean(mesh, P @ u)
    return CellSolution(spec, xi=xi, residual=r, info={"iterations": [it], "rho_integral": total})


def solve_xi_limit_constraint(spec: CellProblemSpec) -> CellSolution:
    if spec.mode is not Mode.XI_LIMIT_CONSTRAINT:
        raise ValueError("solve_xi_limit_constraint needs mode XI_LIMIT_CONSTRAINT")
    mesh = spec.mesh
    total = _check_compatibility(spec)
    ext, Ke = _exterior_system(mesh, spec.eps_e)
    closed, free = _inclusion_masks(mesh)
    P = _reduction(mesh, free, closed)
    A = (P.T @ Ke @ P).tocsr()
    b_e = fem.source_load(mesh.vertices, ext, _rho_at_quadrature(spec, ext), n=mesh.n_vertices)
    inside = rho_integral(spec, INTERIOR)
    rhs = P.T @ b_e
    # net flux  int eps_e grad(xi).n0 dS = -int_{D_i} rho  enters the constant's row
    rhs[-1] += inside
    u, it, r = _solve(A, rhs, nullspace=np.ones(A.shape[0]))
    xi, _ = _zero_mean(mesh, P @ u)
    const = float(np.mean(xi[closed]))
    # residual of the discrete constraint: -sum_Gamma (K xi - b)_a + int_{D_i} rho
    flux = -_interface_flux(mesh, Ke, xi, b_e) - (-inside)
    return CellSolution(
        spec, xi=xi, inclusion_constants=np.array([const]), flux_residual=np.array([flux]), residual=r,
        info={"iterations": [it], "rho_integral": total, "rho_inclusion": inside},
    )


def solve_xi_limit_neumann(spec: CellProblemSpec) -> CellSolution:
    if spec.mode is not Mode.XI_LIMIT_NEUMANN:
        raise ValueError("solve_xi_limit_neumann needs mode XI_LIMIT_NEUMANN")
    mesh = spec.mesh
    total = _check_compatibility(spec)
    outside = rho_integral(spec, EXTERIOR)
    if abs(outside) > COMPATIBILITY_TOL:
        raise CompatibilityError(outside, "int_{D_e} rho dX")
    ext, Ke = _exterior_system(mesh, spec.eps_e)
    closed, free = _inclusion_masks(mesh)
    verts, u_in = _inclusion_neumann(mesh)
    c = float(u_in.mean())
    trace = np.zeros(mesh.n_vertices)
    trace[verts] = c
    b_e = fem.source_load(mesh.vertices, ext, _rho_at_quadrature(spec, ext), n=mesh.n_vertices)
    full, it, r = _exterior_dirichlet(mesh, Ke, b_e, closed, free, trace)
    xi, mean = _zero_mean(mesh, full)
    inside = rho_integral(spec, INTERIOR)
    flux = -_interface_flux(mesh, Ke, xi, b_e) + inside
    return CellSolution(
        spec, xi=xi, inclusion_constants=np.array([c - mean]), flux_residual=np.array([flux]), residual=r,
        info={"iterations": [it], "rho_integral": total, "rho_inclusion": inside},
    )


_DISPATCH = {
    Mode.PSI_FINITE: solve_psi_finite,
    Mode.PSI_LIMIT_NEUMANN: solve_psi_limit_neumann,
    Mode.PSI_LIMIT_CONSTRAINT: solve_psi_limit_constraint,
    Mode.XI_FINITE: solve_xi_finite,
    Mode.XI_LIMIT_NEUMANN: solve_xi_limit_neumann,
    Mode.XI_LIMIT_CONSTRAINT: solve_xi_limit_constraint,
}


def solve_cell(spec: CellProblemSpec) -> CellSolution:
    return _DISPATCH[spec.mode](spec)


def export_solution(sol: CellSolution, path) -> None:
    from .mesh import export_mesh

    fields = {}
    if sol.psi is not None:
        fields["Psi1"], fields["Psi2"] = sol.psi
    if sol.xi is not None:
        fields["xi"] = sol.xi
    export_mesh(sol.mesh, path, fields)
