"""Direct simulation of the fine-scale problem at finite delta.

The unit square is tiled by ``N x N`` cells of side ``delta = 1/N``; cell
``(i, j)`` holds a circular inclusion of radius ``delta a(x_c)`` with ``x_c``
the cell centre.  Per-cell meshes come from :func:`mesh.build_cell_mesh`
(cached by radius), are scaled into place and stitched.  Because the
vertices on cell edges do not depend on the radius, neighbouring cells
match exactly.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.sparse.linalg import splu

from . import fem
from .effective import EffectiveTable, TableMode, build_effective_table
from .exprlang import FieldExpr, as_expr
from .geometry import CellGeometry
from .macro import MacroProblem, MacroSolution, RhoMode, solve_homogenized
from .mesh import INTERIOR, CellMesh, build_cell_mesh

MAX_UNKNOWNS = 2_000_000
RESIDUAL_TOL = 1e-10


class DnsMode(str, Enum):
    STANDARD = "STANDARD"
    LARGE_CHARGE = "LARGE_CHARGE"


class DnsError(RuntimeError):
    pass


@dataclass(frozen=True)
class DnsProblem:
    delta: float
    a_of_x: FieldExpr
    rho: FieldExpr
    eps_e: float = 1.0
    eps_i: float = 1e4
    boundary_value: FieldExpr | str = "0"
    mode: DnsMode = DnsMode.STANDARD
    resolution_per_cell: int = 12

    def __post_init__(self):
        for name in ("a_of_x", "rho", "boundary_value"):
            object.__setattr__(self, name, as_expr(getattr(self, name)))
        object.__setattr__(self, "mode", DnsMode(self.mode))
        n = round(1.0 / self.delta)
        if n < 4 or abs(n * self.delta - 1.0) > 1e-12:
            raise ValueError(f"delta={self.delta!r} must be 1/N for an integer N >= 4")
        if self.resolution_per_cell < 10:
            raise ValueError("resolution_per_cell must be at least 10 (cell mesh size <= 0.1)")
        if not (self.eps_e > 0 and self.eps_i > 0):
            raise ValueError("permittivities must be positive")
        if self.mode is DnsMode.STANDARD and self.rho.variables & {"X1", "X2"}:
            raise ValueError("STANDARD mode takes a charge density in x only")

    @property
    def n_cells(self) -> int:
        return round(1.0 / self.delta)

    @property
    def cell_h(self) -> float:
        return 1.0 / self.resolution_per_cell

    def cell_radii(self) -> np.ndarray:
        n = self.n_cells
        t = (np.arange(n) + 0.5) / n
        X1, X2 = np.meshgrid(t, t, indexing="ij")
        return np.broadcast_to(self.a_of_x.evaluate({"x1": X1, "x2": X2}), X1.shape)


@dataclass
class FineField:
    problem: DnsProblem
    vertices: np.ndarray
    triangles: np.ndarray
    region: np.ndarray
    cell_of_triangle: np.ndarray
    values: np.ndarray
    boundary: np.ndarray
    seconds: float = 0.0
    residual: float = 0.0
    rounding_floor: float = 0.0

    @property
    def unknowns(self) -> int:
        return int(len(self.values) - len(self.boundary))

    def energy(self) -> float:
        coef = np.where(self.region == INTERIOR, self.problem.eps_i, self.problem.eps_e)
        K = fem.stiffness(self.vertices, self.triangles, coef)
        return float(self.values @ (K @ self.values))

    def inclusion_ranges(self) -> np.ndarray:
        """``max - min`` of the field over each inclusion, per cell."""
        inc = self.region == INTERIOR
        cells = np.repeat(self.cell_of_triangle[inc], 3)
        vals = self.values[self.triangles[inc].ravel()]
        n = self.problem.n_cells**2
        hi = np.full(n, -np.inf)
        lo = np.full(n, np.inf)
        np.maximum.at(hi, cells, vals)
        np.minimum.at(lo, cells, vals)
        return hi - lo

    def export(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"vertices {len(self.vertices)}\n")
            for i, ((x, y), u) in enumerate(zip(self.vertices, self.values)):
                fh.write(f"{i} {x!r} {y!r} {u!r}\n")
            fh.write(f"triangles {len(self.triangles)}\n")
            for i, ((a, b, c), r) in enumerate(zip(self.triangles, self.region)):
                fh.write(f"{i} {a} {b} {c} {r}\n")


def _cell_mesh_cache():
    cache: dict = {}

    def get(a: float, h: float) -> CellMesh:
        key = (float(a), float(h))
        if key not in cache:
            cache[key] = build_cell_mesh(CellGeometry(a), h)
        return cache[key]

    return get


def build_global_mesh(problem: DnsProblem):
    """Stitch per-cell meshes into one conforming triangulation of the square."""
    n = problem.n_cells
    radii = problem.cell_radii()
    get = _cell_mesh_cache()
    verts, tris, region, owner = [], [], [], []
    offset = 0
    for i in range(n):
        for j in range(n):
            try:
                m = get(radii[i, j], problem.cell_h)
            except Exception as exc:
                raise DnsError(f"cell ({i}, {j}) with a={radii[i, j]!r}: {exc}") from exc
            v = np.column_stack([(i + m.vertices[:, 0]) / n, (j + m.vertices[:, 1]) / n])
            verts.append(v)
            tris.append(m.triangles + offset)
            region.append(m.region)
            owner.append(np.full(len(m.triangles), i * n + j))
            offset += len(v)
    allv = np.concatenate(verts)
    # exact duplicates along shared cell edges (coordinates computed identically)
    uniq, inverse = np.unique(allv, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    return uniq, inverse[np.concatenate(tris)], np.concatenate(region), np.concatenate(owner)


def _source_values(problem: DnsProblem, pts: np.ndarray, owner: np.ndarray) -> np.ndarray:
    env = {"x1": pts[..., 0], "x2": pts[..., 1]}
    if problem.mode is DnsMode.STANDARD:
        return np.broadcast_to(problem.rho.evaluate(env), pts.shape[:2])
    n = problem.n_cells
    ci, cj = owner // n, owner % n
    env["X1"] = pts[..., 0] * n - ci[:, None]
    env["X2"] = pts[..., 1] * n - cj[:, None]
    return np.broadcast_to(problem.rho.evaluate(env), pts.shape[:2]) / problem.delta


def solve_full(problem: DnsProblem) -> FineField:
    t0 = time.perf_counter()
    V, T, R, owner = build_global_mesh(problem)
    on_edge = (V[:, 0] == 0.0) | (V[:, 0] == 1.0) | (V[:, 1] == 0.0) | (V[:, 1] == 1.0)
    boundary = np.flatnonzero(on_edge)
    free = np.flatnonzero(~on_edge)
    if len(free) > MAX_UNKNOWNS:
        raise DnsError(f"{len(free)} unknowns exceed the limit of {MAX_UNKNOWNS}")
    coef = np.where(R == INTERIOR, problem.eps_i, problem.eps_e)
    K = fem.stiffness(V, T, coef).tocsr()
    pts, _ = fem.quadrature_points(V, T)
    b = fem.source_load(V, T, _source_values(problem, pts, owner))
    u = np.zeros(len(V))
    u[boundary] = np.broadcast_to(problem.boundary_value.evaluate({"x1": V[boundary, 0], "x2": V[boundary, 1]}), boundary.shape)
    rhs = b[free] - K[free][:, boundary] @ u[boundary]
    A = K[free][:, free].tocsc()
    lu = splu(A)
    x = lu.solve(rhs)
    # residual of the diagonally scaled system: with eps_i >> eps_e the raw
    # residual of inclusion rows sits at eps_i times the rounding floor
    dinv = 1.0 / np.sqrt(A.diagonal())
    scale = max(np.linalg.norm(dinv * rhs), 1e-300)
    for _ in range(3):
        r = rhs - A @ x
        res = np.linalg.norm(dinv * r) / scale
        if res <= 1e-12:
            break
        x += lu.solve(r)
    res = np.linalg.norm(dinv * (rhs - A @ x)) / scale
    floor = np.finfo(float).eps * np.linalg.norm(dinv * (abs(A) @ np.abs(x))) / scale
    if not np.isfinite(res) or res > max(RESIDUAL_TOL, 10 * floor):
        raise DnsError(f"fine-scale solve residual {res:.3e} exceeds {RESIDUAL_TOL:g} (rounding floor {floor:.1e})")
    u[free] = x
    return FineField(problem, V, T, R, owner, u, boundary, time.perf_counter() - t0, float(res), float(floor))


def cell_average(fine: FineField, delta: float | None = None) -> np.ndarray:
    """Area-weighted mean of the field over every cell, shape ``(N, N)``."""
    n = fine.problem.n_cells if delta is None else round(1.0 / delta)
    area, _ = fem.triangle_geometry(fine.vertices, fine.triangles)
    integral = np.bincount(fine.cell_of_triangle, area * fine.values[fine.triangles].mean(axis=1), minlength=n * n)
    cell_area = np.bincount(fine.cell_of_triangle, area, minlength=n * n)
    return (integral / cell_area).reshape(n, n)


@dataclass
class ConvergenceReport:
    delta_values: np.ndarray
    errors: np.ndarray
    unknowns: np.ndarray
    seconds: np.ndarray
    slope: float
    extra: dict = field(default_factory=dict)

    @property
    def ratios(self) -> np.ndarray:
        return self.errors[1:] / self.errors[:-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "error_L2", "unknowns", "seconds"])
            for d, e, u, s in zip(self.delta_values, self.errors, self.unknowns, self.seconds):
                w.writerow([f"{d:.17g}", f"{e:.17g}", int(u), f"{s:.6g}"])


@dataclass(frozen=True)
class StudyConfig:
    a_of_x: str = "0.25 + 0.05*sin(2*pi*x1)"
    rho: str = "10*sin(pi*x1)*sin(pi*x2)"
    boundary_value: str = "0"
    eps_e: float = 1.0
    eps_i: float = 1e4
    mode: DnsMode = DnsMode.STANDARD
    resolution_per_cell: int = 12
    macro_grid_n: int = 128
    table_a_values: tuple = (0.15, 0.175, 0.2, 0.225, 0.25, 0.275, 0.3, 0.325)


def homogenised_reference(cfg: StudyConfig, table: EffectiveTable | None = None) -> MacroSolution:
    if table is None:
        rho = None if cfg.mode is DnsMode.STANDARD else cfg.rho
        table = build_effective_table(
            cfg.table_a_values, cfg.eps_e, TableMode.FINITE, rho=rho, eps_i=cfg.eps_i, target_h=1.0 / cfg.resolution_per_cell
        )
    rho_mode = RhoMode.CELL_AVERAGE if cfg.mode is DnsMode.STANDARD else RhoMode.FLUX_DIVERGENCE
    return solve_homogenized(MacroProblem(cfg.a_of_x, table, cfg.rho, cfg.boundary_value, rho_mode, cfg.macro_grid_n))


def homogenisation_error(fine: FineField, macro: MacroSolution) -> float:
    n = fine.problem.n_cells
    t = (np.arange(n) + 0.5) / n
    X1, X2 = np.meshgrid(t, t, indexing="ij")
    ref = macro.at(np.stack([X1, X2], axis=-1))
    avg = cell_average(fine)
    return float(np.sqrt(np.sum((avg - ref) ** 2) / n**2))


def fit_order(deltas, errors) -> float:
    return float(np.polyfit(np.log(deltas), np.log(errors), 1)[0])


def convergence_study(deltas, cfg: StudyConfig = StudyConfig(), macro: MacroSolution | None = None) -> ConvergenceReport:
    """DNS against the homogenised model over decreasing ``deltas``."""
    d = np.asarray(deltas, dtype=float)
    if len(d) < 3:
        raise ValueError("convergence study needs at least 3 deltas")
    if np.any(np.diff(d) >= 0):
        raise ValueError("deltas must be strictly decreasing")
    macro = macro or homogenised_reference(cfg)
    errors, unknowns, seconds = [], [], []
    for delta in d:
        problem = DnsProblem(
            delta, cfg.a_of_x, cfg.rho, cfg.eps_e, cfg.eps_i, cfg.boundary_value, cfg.mode, cfg.resolution_per_cell
        )
        fine = solve_full(problem)
        errors.append(homogenisation_error(fine, macro))
        unknowns.append(fine.unknowns)
        seconds.append(fine.seconds)
    errors = np.array(errors)
    return ConvergenceReport(d, errors, np.array(unknowns), np.array(seconds), fit_order(d, errors))
