"""Acceptance suite: the nine cross-formulation and oracle checks.

Every check returns a :class:`CriterionResult`; :func:`run_all` runs them in
order.  Parameters come from the ``acceptance`` and ``dns`` sections of the
configuration so the CLI and the test-suite use identical settings.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dns, effective, fem, geometry, msint
from .cellsolve import CellProblemSpec, Mode, solve_cell
from .config import load_defaults
from .exprlang import as_expr
from .geometry import CellGeometry
from .mesh import build_cell_mesh, mesh_violations


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""
    seconds: float = 0.0
    data: dict = field(default_factory=dict, repr=False)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.number}. {self.name}: value={self.value:.6g} threshold={self.threshold:.6g} {self.detail}"


def _rel_frobenius(A, B) -> float:
    return float(np.linalg.norm(A - B) / max(np.linalg.norm(A), np.linalg.norm(B)))


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _linear_a(a0, grad, x_hat) -> str:
    return f"{a0!r} + {grad[0]!r}*(x1-{x_hat[0]!r}) + {grad[1]!r}*(x2-{x_hat[1]!r})"


def _flux(cfg) -> msint.FluxField:
    return msint.FluxField(cfg["msint"]["Q1"], cfg["msint"]["Q2"])


@_timed
def eps_routes(cfg) -> CriterionResult:
    """Volume formula at high contrast against both perfect-dielectric boundary formulas."""
    p = cfg["acceptance"]["eps_routes"]
    worst, rows = 0.0, []
    for a in p["a_values"]:
        mesh = build_cell_mesh(CellGeometry(a), p["target_h"])
        vol = effective.epsilon_volume(solve_cell(CellProblemSpec(mesh, Mode.PSI_FINITE, 1.0, p["contrast"]))).eps_eff
        neu = effective.epsilon_boundary(solve_cell(CellProblemSpec(mesh, Mode.PSI_LIMIT_NEUMANN))).eps_eff
        con = effective.epsilon_boundary(solve_cell(CellProblemSpec(mesh, Mode.PSI_LIMIT_CONSTRAINT))).eps_eff
        d = max(_rel_frobenius(vol, neu), _rel_frobenius(vol, con), _rel_frobenius(neu, con))
        worst = max(worst, d)
        rows.append((a, vol[0, 0], neu[0, 0], con[0, 0], d))
    detail = "; ".join(f"a={a}: vol={v:.6f} neu={n:.6f} con={c:.6f}" for a, v, n, c, _ in rows)
    return CriterionResult(1, "eps_eff route agreement", worst <= p["tol"], worst, p["tol"], detail, data={"rows": rows})


def _order_reports(cfg):
    p = cfg["acceptance"]["msint_order"]
    x_hat = cfg["msint"]["x_hat"]
    flux = _flux(cfg)
    moving = msint.order_study(flux, _linear_a(p["a0"], p["grad_a"], x_hat), x_hat, p["delta_values"])
    still = msint.order_study(flux, repr(float(p["a0"])), x_hat, p["delta_values"])
    return moving, still


@_timed
def msint_order(cfg) -> CriterionResult:
    """Slopes of both expansions against the brute-force oracle."""
    p = cfg["acceptance"]["msint_order"]
    moving, still = _order_reports(cfg)
    sc, sn = moving.fitted_slopes["correct"], moving.fitted_slopes["naive"]
    s0 = min(still.fitted_slopes["correct"], still.fitted_slopes["naive"])
    ok = sc >= p["min_slope_correct"] and sn <= p["max_slope_naive"] and s0 >= p["min_slope_correct"]
    detail = f"correct={sc:.3f} naive={sn:.3f} static(min)={s0:.3f}"
    return CriterionResult(2, "multiple-scales form order of accuracy", ok, sc, p["min_slope_correct"], detail)


@_timed
def msint_discrepancy(cfg) -> CriterionResult:
    """Measured first-order misfit of the naive form against the predicted boundary terms."""
    p = cfg["acceptance"]["msint_discrepancy"]
    po = cfg["acceptance"]["msint_order"]
    x_hat = cfg["msint"]["x_hat"]
    report = msint.order_study(_flux(cfg), _linear_a(po["a0"], po["grad_a"], x_hat), x_hat, [4 * p["delta"], 2 * p["delta"], p["delta"]])
    measured = report.misfit_coefficients()[-1]
    predicted = report.misfit_prediction
    rel = abs(measured - predicted) / abs(predicted)
    detail = f"measured={measured:.6g} predicted={predicted:.6g} (oint Q.n1={report.discrepancy_term:.6g})"
    return CriterionResult(3, "naive-form discrepancy identification", rel <= p["tol"], rel, p["tol"], detail)


@_timed
def open_curve(cfg) -> CriterionResult:
    """Full-circle consistency and open-arc order of accuracy."""
    p = cfg["acceptance"]["open_curve"]
    po = cfg["acceptance"]["msint_order"]
    x_hat = cfg["msint"]["x_hat"]
    flux = _flux(cfg)
    a_expr = _linear_a(po["a0"], po["grad_a"], x_hat)
    geom = CellGeometry.from_expr(a_expr, x_hat)
    quad = geometry.boundary_quadrature(geom, cfg["msint"]["n_boundary"])
    gap = 0.0
    for d in po["delta_values"]:
        full = msint.open_curve_form(flux, msint.Arc(geom, 0.0, 2 * math.pi), x_hat, d, quad)
        gap = max(gap, abs(full - msint.ms_form_correct(flux, geom, x_hat, d, quad)))
    report = msint.order_study(flux, a_expr, x_hat, po["delta_values"], arc=tuple(p["arc"]))
    slope = report.fitted_slopes["correct"]
    ok = gap <= p["consistency_tol"] and slope >= p["min_slope"]
    return CriterionResult(4, "open-curve end-point term", ok, slope, p["min_slope"], f"closed-curve gap={gap:.2e} arc slope={slope:.3f}")


@_timed
def rho_routes(cfg) -> CriterionResult:
    """Effective charge by the volume-flux route against the boundary route."""
    p = cfg["acceptance"]["rho_routes"]
    table = effective.build_effective_table(p["a_values"], 1.0, p["mode"], rho=p["rho"], target_h=p["target_h"])
    worst, rows = 0.0, []
    for x1 in p["x1_samples"]:
        r = effective.rho_eff_flux_divergence(table, p["a_of_x"], (x1, 0.0))
        rel = abs(r.flux_form - r.boundary_form) / abs(r.flux_form)
        worst = max(worst, rel)
        rows.append((x1, r.flux_form, r.boundary_form))
    detail = "; ".join(f"x1={x}: F-form={f:.5g} G-form={g:.5g}" for x, f, g in rows[:: max(1, len(rows) // 3)])
    # the two flux tables differ by the inclusion dipole int_{D_i} rho X dX
    rho = as_expr(p["rho"])
    dipole = np.array(
        [[geometry.disk_integral(CellGeometry(a), lambda X1, X2, k=k: rho.evaluate({"X1": X1, "X2": X2}) * (X1, X2)[k]) for k in range(2)] for a in table.a_values]
    )
    mismatch = float(np.max(np.abs(table.F - table.G - dipole)) / np.max(np.abs(table.F)))
    detail += f"; max|F-G-dipole|/max|F|={mismatch:.2e}"
    return CriterionResult(5, "rho_eff route agreement", worst <= p["tol"], worst, p["tol"], detail, data={"rows": rows, "table": table})


@_timed
def limit_consistency(cfg) -> CriterionResult:
    """Finite-contrast volume formula approaching the perfect-dielectric value.

    The reference is the volume formula on the perfect-dielectric solution of
    the same mesh, so the gaps measure the contrast error alone; the gap to
    the boundary formula is reported alongside.
    """
    p = cfg["acceptance"]["limit_consistency"]
    final, monotone, rows = 0.0, True, []
    for a in p["a_values"]:
        mesh = build_cell_mesh(CellGeometry(a), p["target_h"])
        lim_sol = solve_cell(CellProblemSpec(mesh, Mode.PSI_LIMIT_CONSTRAINT))
        lim = effective.epsilon_volume(lim_sol).eps_eff
        lim_b = effective.epsilon_boundary(lim_sol).eps_eff
        gaps = []
        for c in p["contrasts"]:
            vol = effective.epsilon_volume(solve_cell(CellProblemSpec(mesh, Mode.PSI_FINITE, 1.0, c))).eps_eff
            gaps.append(_rel_frobenius(vol, lim))
        monotone &= bool(np.all(np.diff(gaps) < 0))
        final = max(final, gaps[-1], _rel_frobenius(vol, lim_b))
        rows.append((a, gaps, _rel_frobenius(vol, lim_b)))
    detail = "; ".join(f"a={a}: gaps=" + ",".join(f"{g:.2e}" for g in gs) + f" (boundary formula {gb:.2e})" for a, gs, gb in rows)
    return CriterionResult(6, "limit consistency", monotone and final < p["tol"], final, p["tol"], detail + f" monotone={monotone}")


@_timed
def dilute(cfg) -> CriterionResult:
    """Perfect-dielectric effective permittivity against the dilute estimate 1 + 2 pi a^2."""
    p = cfg["acceptance"]["dilute"]
    a = p["a"]
    mesh = build_cell_mesh(CellGeometry(a), p["target_h"])
    eps = effective.epsilon_boundary(solve_cell(CellProblemSpec(mesh, Mode.PSI_LIMIT_CONSTRAINT))).eps_iso
    oracle = 1.0 + 2.0 * math.pi * a * a
    rel = abs(eps - oracle) / oracle
    detail = f"eps_eff={eps:.6f} oracle={oracle:.6f} excess ratio={(eps - 1) / (oracle - 1):.4f}"
    return CriterionResult(7, "dilute-limit oracle", rel <= p["tol"], rel, p["tol"], detail)


def study_config(cfg) -> dns.StudyConfig:
    d = cfg["dns"]
    return dns.StudyConfig(
        a_of_x=d["a_of_x"],
        rho=d["rho"],
        boundary_value=d["boundary_value"],
        eps_e=d["eps_e"],
        eps_i=d["eps_i"],
        mode=dns.DnsMode(d["mode"]),
        resolution_per_cell=d["resolution_per_cell"],
        macro_grid_n=d["macro_grid_n"],
        table_a_values=tuple(d["table_a_values"]),
    )


@_timed
def dns_validation(cfg) -> CriterionResult:
    """Cell-averaged DNS converging to the homogenised solution as delta shrinks."""
    p = cfg["acceptance"]["dns"]
    report = dns.convergence_study(cfg["dns"]["deltas"], study_config(cfg))
    ratios = report.ratios
    monotone = bool(np.all(ratios < 1))
    ok = monotone and (bool(np.all(ratios <= p["max_ratio"])) or report.slope >= p["min_slope"])
    detail = "errors=" + ",".join(f"{e:.3e}" for e in report.errors) + " ratios=" + ",".join(f"{r:.3f}" for r in ratios)
    return CriterionResult(8, "DNS validation", ok, report.slope, p["min_slope"], detail, data={"report": report})


def _transport_checks(a: float, tol: float) -> list[str]:
    bad = []
    step = 1e-4
    geom = CellGeometry(a)
    quad = geometry.boundary_quadrature(geom, 256)
    for name, f in (("1", lambda X1, X2: np.ones_like(X1)), ("X1^2", lambda X1, X2: X1**2)):
        lhs = (
            geometry.exterior_integral(CellGeometry(a + step), f) - geometry.exterior_integral(CellGeometry(a - step), f)
        ) / (2 * step)
        rhs = -quad.integrate(f(quad.points[:, 0], quad.points[:, 1]))
        if abs(lhs - rhs) > tol * abs(rhs):
            bad.append(f"transport identity f={name} a={a}: {lhs!r} vs {rhs!r}")
    return bad


def invariant_violations(cfg) -> tuple[int, list[str]]:
    """Run the invariant suite; returns ``(number of checks, violations)``."""
    p = cfg["acceptance"]["invariants"]
    rho = cfg["cell"]["rho"]
    bad: list[str] = []
    n = 0
    for a in p["a_values"]:
        geom = CellGeometry(a)
        mesh = build_cell_mesh(geom, p["target_h"])
        bad += [f"mesh a={a}: {v}" for v in mesh_violations(mesh)]
        quad = geometry.boundary_quadrature(CellGeometry(a, (0.1, 0.05)), 64)
        if abs(quad.weights.sum() - 2 * math.pi * a) > 1e-12:
            bad.append(f"quadrature weights a={a}")
        if np.abs(np.einsum("qk,qk->q", quad.normals0, quad.normals1)).max() > 1e-14:
            bad.append(f"n0.n1 != 0 at a={a}")
        if np.abs(np.einsum("qjk,qk->qj", quad.velocity, quad.normals0) - np.array([0.1, 0.05])).max() > 1e-14:
            bad.append(f"V.n0 != grad a at a={a}")
        bad += _transport_checks(a, p["transport_tol"])
        n += 6
        solutions = [solve_cell(CellProblemSpec(mesh, m)) for m in (Mode.PSI_LIMIT_NEUMANN, Mode.PSI_LIMIT_CONSTRAINT)]
        solutions += [solve_cell(CellProblemSpec(mesh, Mode.PSI_FINITE, 1.0, c)) for c in p["contrasts"]]
        solutions += [solve_cell(CellProblemSpec(mesh, Mode.XI_FINITE, 1.0, c, rho=rho)) for c in p["contrasts"]]
        solutions += [solve_cell(CellProblemSpec(mesh, m, rho=rho)) for m in (Mode.XI_LIMIT_NEUMANN, Mode.XI_LIMIT_CONSTRAINT)]
        master = mesh.master()
        for sol in solutions:
            for k, f in enumerate(sol.fields):
                n += 2
                mean = fem.integrate_p1(mesh.vertices, mesh.triangles, f)
                if abs(mean) > 1e-10:
                    bad.append(f"{sol.spec.mode.value} a={a} field {k}: mean {mean:.2e}")
                if np.any(f != f[master]):
                    bad.append(f"{sol.spec.mode.value} a={a} field {k}: not periodic")
            if sol.psi is not None:
                n += 1
                coeffs = [effective.epsilon_boundary(sol)]
                if sol.spec.mode is Mode.PSI_FINITE:
                    coeffs.append(effective.epsilon_volume(sol))
                for c in coeffs:
                    bad += [f"{sol.spec.mode.value} a={a} eps_i={sol.spec.eps_i:g} {c.formula.value}: {v}" for v in c.violations()]
    return n, bad


@_timed
def invariants(cfg) -> CriterionResult:
    """Type invariants across the default configuration matrix."""
    n, bad = invariant_violations(cfg)
    detail = f"{n} checks" + ("" if not bad else "; " + "; ".join(bad[:5]))
    return CriterionResult(9, "invariant suites", not bad, float(len(bad)), 0.0, detail)


CRITERIA = (eps_routes, msint_order, msint_discrepancy, open_curve, rho_routes, limit_consistency, dilute, dns_validation, invariants)


def run_all(cfg=None, only=None, log=None) -> list[CriterionResult]:
    cfg = cfg or load_defaults()
    results = []
    for i, crit in enumerate(CRITERIA, start=1):
        if only and i not in only:
            continue
        res = crit(cfg)
        if log:
            log(res.line())
        results.append(res)
    return results


def write_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["criterion", "name", "passed", "value", "threshold", "detail"])
        for r in results:
            w.writerow([r.number, r.name, "pass" if r.passed else "fail", f"{r.value:.17g}", f"{r.threshold:.17g}", r.detail])
