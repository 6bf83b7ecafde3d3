import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowhomog import geometry as g
from slowhomog.geometry import CellGeometry, GeometryError


def test_radius_bounds():
    for a in (0.0, 0.5, -0.1, 0.6):
        with pytest.raises(GeometryError):
            CellGeometry(a)


def test_level_set_sign():
    geom = CellGeometry(0.2)
    assert g.level_set(geom, (0.5, 0.5)) == pytest.approx(-0.2)
    assert g.level_set(geom, (0.7, 0.5)) == pytest.approx(0.0, abs=1e-15)
    assert g.level_set(geom, (0.0, 0.0)) > 0


def test_normal_at_centre_undefined():
    with pytest.raises(GeometryError):
        g.normal0(CellGeometry(0.2), (0.5, 0.5))


@settings(max_examples=50, deadline=None)
@given(
    a=st.floats(0.05, 0.45),
    g1=st.floats(-1, 1),
    g2=st.floats(-1, 1),
    theta=st.floats(0, 2 * math.pi),
)
def test_normals_unit_and_orthogonal(a, g1, g2, theta):
    geom = CellGeometry(a, (g1, g2))
    X = g.CENTER + a * np.array([math.cos(theta), math.sin(theta)])
    n0, n1 = g.normal0(geom, X), g.normal1(geom, X)
    assert np.linalg.norm(n0) == pytest.approx(1.0)
    assert abs(n0 @ n1) < 1e-14
    V = g.boundary_velocity(geom, X)
    np.testing.assert_allclose(V @ n0, [g1, g2], atol=1e-14)


@pytest.mark.parametrize("a", [0.1, 0.25, 0.4])
def test_quadrature_weights_sum_to_perimeter(a):
    q = g.boundary_quadrature(CellGeometry(a), 64)
    assert q.weights.sum() == pytest.approx(2 * math.pi * a, rel=1e-14)
    assert q.integrate(q.normals0[:, 0] ** 2) == pytest.approx(math.pi * a, rel=1e-13)


def test_arc_quadrature_length():
    q = g.arc_quadrature(CellGeometry(0.2), 0.3, 1.8, 32)
    assert q.weights.sum() == pytest.approx(0.2 * 1.5, rel=1e-13)
    with pytest.raises(GeometryError):
        g.arc_quadrature(CellGeometry(0.2), 1.0, 1.0)


def test_disk_and_cell_integrals():
    geom = CellGeometry(0.3)
    assert g.disk_integral(geom, lambda X1, X2: np.ones_like(X1)) == pytest.approx(math.pi * 0.09, rel=1e-13)
    assert g.cell_integral(lambda X1, X2: X1 * X2) == pytest.approx(0.25, rel=1e-13)
    assert g.exterior_integral(geom, lambda X1, X2: np.ones_like(X1)) == pytest.approx(1 - math.pi * 0.09, rel=1e-13)


@pytest.mark.parametrize("a", [0.1, 0.2, 0.3])
def test_transport_identity(a):
    """d/da of an exterior integral equals minus the boundary integral of the integrand."""
    f = lambda X1, X2: X1**2 + np.sin(3 * X2)
    step = 1e-4
    lhs = (g.exterior_integral(CellGeometry(a + step), f) - g.exterior_integral(CellGeometry(a - step), f)) / (2 * step)
    q = g.boundary_quadrature(CellGeometry(a), 256)
    rhs = -q.integrate(f(q.points[:, 0], q.points[:, 1]))
    assert lhs == pytest.approx(rhs, rel=1e-6)


def test_from_expr_gradient():
    geom = CellGeometry.from_expr("0.25 + 0.1*(x1-0.3) + 0.05*(x2-0.4)", (0.3, 0.4))
    assert geom.a == pytest.approx(0.25)
    np.testing.assert_allclose(geom.g, [0.1, 0.05], rtol=1e-8)
