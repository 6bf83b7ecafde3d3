import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from slowhomog import fem
from slowhomog.geometry import CellGeometry
from slowhomog.mesh import build_cell_mesh


def _dirichlet_error(h):
    """L2 error of -lap u = f on the unit square with u = sin(pi X1) sin(pi X2)."""
    m = build_cell_mesh(CellGeometry(0.2), h)
    v, t = m.vertices, m.triangles
    K = fem.stiffness(v, t, np.ones(len(t)))
    pts, _ = fem.quadrature_points(v, t)
    f = 2 * np.pi**2 * np.sin(np.pi * pts[..., 0]) * np.sin(np.pi * pts[..., 1])
    b = fem.source_load(v, t, f)
    bnd = np.unique(m.outer_edges)
    free = np.setdiff1d(np.arange(len(v)), bnd)
    u = np.zeros(len(v))
    u[free], _ = fem.pcg(K[free][:, free], b[free], rtol=1e-10)
    exact = np.sin(np.pi * v[:, 0]) * np.sin(np.pi * v[:, 1])
    return fem.l2_norm_p1(v, t, u - exact)


def test_manufactured_solution_second_order():
    e1, e2 = _dirichlet_error(0.04), _dirichlet_error(0.02)
    assert np.log2(e1 / e2) > 1.8


def test_gradients_exact_for_linear_fields(mesh_factory):
    m = mesh_factory(0.25)
    u = 2.0 * m.vertices[:, 0] - 3.0 * m.vertices[:, 1] + 1.0
    g = fem.p1_gradients(m.vertices, m.triangles, u)
    np.testing.assert_allclose(g, np.tile([2.0, -3.0], (len(g), 1)), atol=1e-11)


def test_stiffness_symmetric_with_constant_kernel(mesh_factory):
    m = mesh_factory(0.25)
    K = fem.stiffness(m.vertices, m.triangles, np.linspace(1, 2, len(m.triangles)))
    assert abs(K - K.T).max() < 1e-14
    assert np.abs(K @ np.ones(m.n_vertices)).max() < 1e-12


def test_gradient_load_matches_stiffness_of_linear_field(mesh_factory):
    m = mesh_factory(0.25)
    coef = np.where(m.region == 1, 5.0, 1.0)
    K = fem.stiffness(m.vertices, m.triangles, coef)
    b = fem.gradient_load(m.vertices, m.triangles, coef, (1.0, 0.0))
    np.testing.assert_allclose(K @ m.vertices[:, 0], -b, atol=1e-12)


def test_integrals(mesh_factory):
    m = mesh_factory(0.25)
    x = m.vertices[:, 0]
    assert fem.integrate_p1(m.vertices, m.triangles, x) == pytest.approx(0.5, abs=1e-14)
    pts, _ = fem.quadrature_points(m.vertices, m.triangles)
    assert fem.integrate_qp(m.vertices, m.triangles, pts[..., 0] ** 2) == pytest.approx(1 / 3, abs=1e-13)
    assert fem.l2_norm_p1(m.vertices, m.triangles, np.ones(m.n_vertices)) == pytest.approx(1.0, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 60), st.integers(0, 2**31 - 1))
def test_pcg_solves_random_spd(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    A = M @ M.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x, _ = fem.pcg(sp.csr_matrix(A), b, rtol=1e-12)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_pcg_singular_with_nullspace():
    n = 40
    L = sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tolil()
    L[0, n - 1] = L[n - 1, 0] = -1  # periodic Laplacian, kernel = constants
    b = np.sin(2 * np.pi * np.arange(n) / n)
    x, _ = fem.pcg(L.tocsr(), b, nullspace=np.ones(n))
    np.testing.assert_allclose(L @ x, b, atol=1e-10)


def test_pcg_rejects_bad_diagonal():
    with pytest.raises(fem.SolverError):
        fem.pcg(sp.csr_matrix(np.diag([1.0, 0.0])), np.ones(2))


def test_pcg_reports_non_convergence():
    A = sp.diags(np.logspace(0, 6, 200)) + sp.diags(np.full(199, 0.4), 1) + sp.diags(np.full(199, 0.4), -1)
    with pytest.raises(fem.SolverError, match="did not converge"):
        fem.pcg(sp.csr_matrix(A), np.ones(200), rtol=1e-14, maxiter=3)
