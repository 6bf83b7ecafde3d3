import math

import numpy as np
import pytest

from slowhomog.geometry import CellGeometry, GeometryError
from slowhomog.mesh import EXTERIOR, INTERIOR, build_cell_mesh, export_mesh, mesh_violations


@pytest.mark.parametrize("a", [0.1, 0.25, 0.3, 0.45])
def test_structural_invariants(a):
    assert mesh_violations(build_cell_mesh(CellGeometry(a), 0.02)) == []


@pytest.mark.parametrize("a", [0.1, 0.3])
def test_region_areas(mesh_factory, a):
    m = mesh_factory(a, 0.02)
    assert m.areas.sum() == pytest.approx(1.0, abs=1e-13)
    e = m.vertices[m.interface_edges]
    polygon = 0.5 * np.sum((e[:, 0, 0] - 0.5) * (e[:, 1, 1] - 0.5) - (e[:, 1, 0] - 0.5) * (e[:, 0, 1] - 0.5))
    assert m.region_area(INTERIOR) == pytest.approx(polygon, rel=1e-13)
    assert m.region_area(INTERIOR) == pytest.approx(math.pi * a * a, rel=1e-2)
    assert m.region_area(EXTERIOR) + m.region_area(INTERIOR) == pytest.approx(1.0, abs=1e-13)


def test_interface_vertices_on_circle(mesh_factory):
    m = mesh_factory(0.2)
    r = np.linalg.norm(m.vertices[m.interface_vertices] - 0.5, axis=1)
    np.testing.assert_allclose(r, 0.2, atol=1e-14)


def test_periodic_pairs_are_unit_translates(mesh_factory):
    m = mesh_factory(0.2)
    for s, t in m.periodic_pairs.items():
        d = m.vertices[s] - m.vertices[t]
        assert sorted(np.round(np.abs(d), 14)) in ([0.0, 1.0],)
    master = m.master()
    assert np.all(master[master] == master)


def test_symmetry_group(mesh_factory):
    m = mesh_factory(0.2)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    perm = m.symmetry_permutation(rot)
    np.testing.assert_allclose(m.vertices[perm] - 0.5, (m.vertices - 0.5) @ rot.T, atol=1e-13)


def test_infeasible_radius_rejected():
    with pytest.raises(GeometryError, match="0.5 - 2"):
        build_cell_mesh(CellGeometry(0.47), 0.02)
    with pytest.raises(GeometryError):
        build_cell_mesh(CellGeometry(0.2), 0.2)


def test_deterministic(mesh_factory):
    a = build_cell_mesh(CellGeometry(0.2), 0.04)
    b = mesh_factory(0.2, 0.04)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)


def test_export(tmp_path, mesh_factory):
    m = mesh_factory(0.2)
    path = tmp_path / "m.txt"
    export_mesh(m, path, {"u": m.vertices[:, 0]})
    text = path.read_text()
    assert f"vertices {m.n_vertices}" in text
    assert "interface_edges" in text and "periodic_pairs" in text
