import math

import numpy as np
import pytest

from slowhomog import dns, fem
from slowhomog.mesh import INTERIOR


def _problem(**kw):
    base = dict(delta=0.25, a_of_x="0.25 + 0.05*sin(2*pi*x1)", rho="10*sin(pi*x1)*sin(pi*x2)", eps_i=1e4)
    base.update(kw)
    return dns.DnsProblem(**base)


def test_problem_validation():
    with pytest.raises(ValueError):
        _problem(delta=0.3)
    with pytest.raises(ValueError):
        _problem(delta=0.5)
    with pytest.raises(ValueError):
        _problem(resolution_per_cell=8)
    with pytest.raises(ValueError):
        _problem(rho="sin(2*pi*X1)")
    _problem(rho="sin(2*pi*X1)*x1", mode=dns.DnsMode.LARGE_CHARGE)


def test_global_mesh_tiles_the_square():
    p = _problem()
    V, T, R, owner = dns.build_global_mesh(p)
    area, _ = fem.triangle_geometry(V, T)
    assert area.min() > 0
    assert area.sum() == pytest.approx(1.0, abs=1e-13)
    inc = np.bincount(owner, area * (R == INTERIOR), minlength=16)
    np.testing.assert_allclose(inc, math.pi * (p.cell_radii().ravel() * p.delta) ** 2, rtol=2e-2)
    # conforming: every interior edge shared by exactly two triangles
    e = np.sort(np.concatenate([T[:, [0, 1]], T[:, [1, 2]], T[:, [2, 0]]]), axis=1)
    edges, counts = np.unique(e, axis=0, return_counts=True)
    assert set(np.unique(counts)) <= {1, 2}
    mid = V[edges[counts == 1]].mean(axis=1)
    assert np.all(np.isclose(mid, 0.0, atol=1e-15).any(axis=1) | np.isclose(mid, 1.0, atol=1e-15).any(axis=1))


def test_uniform_medium_matches_exact_solution():
    """eps_i = eps_e, rho = 2 pi^2 sin sin: phi = sin(pi x1) sin(pi x2)."""
    p = _problem(eps_i=1.0, rho="2*pi^2*sin(pi*x1)*sin(pi*x2)", resolution_per_cell=16)
    fine = dns.solve_full(p)
    exact = np.sin(np.pi * fine.vertices[:, 0]) * np.sin(np.pi * fine.vertices[:, 1])
    assert np.abs(fine.values - exact).max() < 5e-3
    assert fine.residual <= max(dns.RESIDUAL_TOL, 10 * fine.rounding_floor)


def test_high_contrast_field_nearly_constant_in_inclusions():
    fine = dns.solve_full(_problem())
    assert fine.inclusion_ranges().max() < 1e-3 * np.abs(fine.values).max()
    assert fine.energy() > 0


def test_cell_average_of_linear_field():
    fine = dns.solve_full(_problem(rho="0", boundary_value="x1 + 2*x2", eps_i=1.0))
    t = (np.arange(4) + 0.5) / 4
    X1, X2 = np.meshgrid(t, t, indexing="ij")
    np.testing.assert_allclose(dns.cell_average(fine), X1 + 2 * X2, atol=1e-10)


def test_export(tmp_path):
    fine = dns.solve_full(_problem(resolution_per_cell=10))
    fine.export(tmp_path / "f.txt")
    assert (tmp_path / "f.txt").read_text().startswith(f"vertices {len(fine.vertices)}")


def test_study_validation():
    with pytest.raises(ValueError):
        dns.convergence_study([0.25, 0.125])
    with pytest.raises(ValueError):
        dns.convergence_study([0.125, 0.25, 0.0625])


def test_resolution_refinement_changes_error_little():
    """At fixed delta the homogenisation error is dominated by the model, not the mesh."""
    errs = []
    for res in (12, 16):
        cfg = dns.StudyConfig(resolution_per_cell=res)
        macro = dns.homogenised_reference(cfg)
        p = dns.DnsProblem(0.125, cfg.a_of_x, cfg.rho, cfg.eps_e, cfg.eps_i, cfg.boundary_value, cfg.mode, res)
        errs.append(dns.homogenisation_error(dns.solve_full(p), macro))
    assert abs(errs[1] - errs[0]) < 0.1 * errs[0]


def test_report_csv(tmp_path):
    rep = dns.ConvergenceReport(np.array([0.25, 0.125, 0.0625]), np.array([4e-3, 1e-3, 2.5e-4]), np.array([10, 40, 160]), np.zeros(3), 2.0)
    np.testing.assert_allclose(rep.ratios, [0.25, 0.25])
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "delta,error_L2,unknowns,seconds"
    assert dns.fit_order(rep.delta_values, rep.errors) == pytest.approx(2.0)
