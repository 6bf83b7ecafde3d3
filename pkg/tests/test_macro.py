import numpy as np
import pytest

from slowhomog.effective import EffectiveTable
from slowhomog.macro import MacroError, MacroProblem, RhoMode, assemble, solve_homogenized


def _table():
    a = np.linspace(0.1, 0.4, 7)
    F = np.column_stack([a**2, 0 * a])
    return EffectiveTable(a, 1.0 + a, F, F)


EPS = "(1.2 + 0.1*x1)"
U = "sin(pi*x1)*sin(pi*x2)"
RHO = f"2*pi^2*{EPS}*{U} - 0.1*pi*cos(pi*x1)*sin(pi*x2)"


def _error(n):
    sol = solve_homogenized(MacroProblem("0.2 + 0.1*x1", _table(), RHO, "0", grid_n=n))
    X1, X2 = sol.problem.centres()
    return np.sqrt(np.mean((sol.phi - np.sin(np.pi * X1) * np.sin(np.pi * X2)) ** 2))


def test_manufactured_solution_second_order():
    assert _error(32) / _error(64) > 3.6


def test_linear_solution_reproduced():
    sol = solve_homogenized(MacroProblem("0.25", _table(), "0", "1 + 2*x1 - x2", grid_n=16))
    X1, X2 = sol.problem.centres()
    np.testing.assert_allclose(sol.phi, 1 + 2 * X1 - X2, atol=1e-10)
    pts = np.array([[0.0, 0.3], [1.0, 0.7], [0.4, 1.0]])
    np.testing.assert_allclose(sol.at(pts), 1 + 2 * pts[:, 0] - pts[:, 1], atol=1e-10)


def test_discrete_conservation():
    sol = solve_homogenized(MacroProblem("0.25 + 0.05*sin(2*pi*x1)", _table(), "10*sin(pi*x1)*sin(pi*x2)", "0", grid_n=32))
    total_charge = np.sum(sol.rho_eff) * sol.problem.h**2
    assert sol.boundary_flux() + total_charge == pytest.approx(0.0, abs=1e-9 * total_charge)


def test_matrix_symmetric_positive_definite():
    eps = np.random.default_rng(0).uniform(1, 3, (6, 6))
    A = assemble(eps, 1 / 6).toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-14)
    assert np.linalg.eigvalsh(A).min() > 0


def test_cell_average_of_fast_charge_vanishes():
    sol = solve_homogenized(MacroProblem("0.25", _table(), "sin(2*pi*X1)*x1", "0", grid_n=8))
    assert np.abs(sol.rho_eff).max() < 1e-10
    assert np.abs(sol.phi).max() < 1e-10


def test_flux_divergence_mode_uses_table_slope():
    sol = solve_homogenized(MacroProblem("0.2 + 0.1*x1", _table(), "0", "0", rho_mode=RhoMode.FLUX_DIVERGENCE, grid_n=8))
    X1, _ = sol.problem.centres()
    np.testing.assert_allclose(sol.rho_eff, 2 * (0.2 + 0.1 * X1) * 0.1, rtol=1e-3)


def test_table_range_enforced():
    with pytest.raises(MacroError, match="outside usable table range"):
        MacroProblem("0.05 + 0.3*x1", _table(), "1", "0")
    with pytest.raises(MacroError):
        MacroProblem("0.1 + 0.01*x1", _table(), "1", "0", rho_mode=RhoMode.FLUX_DIVERGENCE)


def test_csv_exports(tmp_path):
    sol = solve_homogenized(MacroProblem("0.25", _table(), "1", "0", grid_n=8))
    sol.to_csv(tmp_path / "s.csv")
    sol.coefficients_to_csv(tmp_path / "c.csv")
    s = (tmp_path / "s.csv").read_text().splitlines()
    c = (tmp_path / "c.csv").read_text().splitlines()
    assert s[0] == "x1,x2,phi0" and len(s) == 65
    assert c[0] == "x1,x2,eps_eff,rho_eff"
