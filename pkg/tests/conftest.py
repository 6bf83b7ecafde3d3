import pytest

from slowhomog.geometry import CellGeometry
from slowhomog.mesh import build_cell_mesh


@pytest.fixture(scope="session")
def mesh_factory():
    cache = {}

    def get(a, h=0.04):
        key = (a, h)
        if key not in cache:
            cache[key] = build_cell_mesh(CellGeometry(a), h)
        return cache[key]

    return get
