"""Boundary-conforming periodic triangulation of the unit cell.

The mesh is generated on the fundamental wedge ``{0.5 <= X1 <= 1,
0.5 <= X2 <= X1}`` of the square's symmetry group and reflected into the
other seven wedges, so every mesh is exactly D4-symmetric about the cell
centre and the vertices on opposite cell edges are exact translates.

Wedge points: the circle arc and the wedge boundary (mirror lines plus
cell edge) are sampled explicitly; the interior is filled from a square lattice with
points too close to the circle or the wedge edges dropped, and then
triangulated by Delaunay.  The clearance keeps every circle chord a
Gabriel edge, so no triangle crosses the interface.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

from .geometry import CENTER, CellGeometry, GeometryError

EXTERIOR = 0
INTERIOR = 1

_D4 = [
    np.array(m, dtype=float)
    for m in (
        [[1, 0], [0, 1]],
        [[0, 1], [1, 0]],
        [[-1, 0], [0, 1]],
        [[0, -1], [1, 0]],
        [[1, 0], [0, -1]],
        [[0, 1], [-1, 0]],
        [[-1, 0], [0, -1]],
        [[0, -1], [-1, 0]],
    )
]


@dataclass(frozen=True)
class CellMesh:
    vertices: np.ndarray  # (nv, 2)
    triangles: np.ndarray  # (nt, 3), counter-clockwise
    region: np.ndarray  # (nt,), EXTERIOR or INTERIOR
    interface_edges: np.ndarray  # (ni, 2), counter-clockwise around the centre
    interface_normals: np.ndarray  # (ni, 2), outward chord normals
    interface_exterior_tri: np.ndarray  # (ni,), exterior triangle on each edge
    outer_edges: np.ndarray  # (nb, 2)
    outer_tri: np.ndarray  # (nb,), triangle owning each outer edge
    periodic_pairs: dict  # slave vertex -> master vertex, translate by (1,0) or (0,1)
    geom: CellGeometry
    target_h: float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def region_area(self, region: int) -> float:
        return float(self.areas[self.region == region].sum())

    @property
    def interface_vertices(self) -> np.ndarray:
        return np.unique(self.interface_edges)

    @property
    def interior_vertices(self) -> np.ndarray:
        """Vertices of the closed inclusion (interface included)."""
        return np.unique(self.triangles[self.region == INTERIOR])

    @property
    def exterior_vertices(self) -> np.ndarray:
        return np.unique(self.triangles[self.region == EXTERIOR])

    def master(self) -> np.ndarray:
        """Index of the periodic master of every vertex (itself if unpaired)."""
        m = np.arange(self.n_vertices)
        for s, t in self.periodic_pairs.items():
            m[s] = t
        for _ in range(2):  # the (1,1) corner resolves in two hops
            m = m[m]
        return m

    def symmetry_permutation(self, transform) -> np.ndarray:
        """Vertex permutation induced by a symmetry ``X -> c + T (X - c)``."""
        from scipy.spatial import cKDTree

        T = np.asarray(transform, dtype=float)
        mapped = CENTER + (self.vertices - CENTER) @ T.T
        dist, idx = cKDTree(self.vertices).query(mapped)
        if dist.max() > 1e-12:
            raise GeometryError("mesh is not invariant under the transform")
        return idx


def _wedge_points(a: float, s: float) -> np.ndarray:
    """Points of the fundamental wedge in coordinates relative to the centre."""
    pts = []
    # circle arc, 0 <= theta <= pi/4
    m_c = max(2, math.ceil(a * math.pi / 4 / s))
    th = np.linspace(0.0, math.pi / 4, m_c + 1)
    arc = np.column_stack([a * np.cos(th), a * np.sin(th)])
    arc[0] = (a, 0.0)
    arc[-1] = (a / math.sqrt(2.0), a / math.sqrt(2.0))
    pts.append(arc)
    # mirror line X2 = 0.5 and the diagonal, each split at the circle
    for direction, length in ((np.array([1.0, 0.0]), 0.5), (np.array([1.0, 1.0]) / math.sqrt(2.0), 0.5 * math.sqrt(2.0))):
        n_in = max(1, math.ceil(a / s))
        n_out = max(1, math.ceil((length - a) / s))
        radii = np.concatenate([np.linspace(0.0, a, n_in + 1)[:-1], np.linspace(a, length, n_out + 1)[1:]])
        if direction[1] == 0.0:
            seg = np.column_stack([radii, np.zeros_like(radii)])
        else:
            diag = radii / math.sqrt(2.0)
            seg = np.column_stack([diag, diag])
            seg[-1] = (0.5, 0.5)
        pts.append(seg)
    # cell edge X1 = 1, independent of a so neighbouring cells conform
    m_e = math.ceil(0.5 / s)
    v = np.linspace(0.0, 0.5, m_e + 1)
    pts.append(np.column_stack([np.full_like(v, 0.5), v]))
    # lattice fill
    n_lat = math.ceil(0.5 / s)
    g = (np.arange(1, n_lat) + 0.0) * (0.5 / n_lat)
    U, V = np.meshgrid(g, g, indexing="ij")
    cand = np.column_stack([U.ravel(), V.ravel()])
    clear = 0.5 * s
    r = np.linalg.norm(cand, axis=1)
    keep = (
        (cand[:, 1] >= clear)
        & ((cand[:, 0] - cand[:, 1]) / math.sqrt(2.0) >= clear)
        & (0.5 - cand[:, 0] >= clear)
        & (np.abs(r - a) >= 0.6 * s)
    )
    pts.append(cand[keep])
    allpts = np.concatenate(pts)
    # drop exact duplicates (shared corners)
    _, first = np.unique(allpts, axis=0, return_index=True)
    return allpts[np.sort(first)]


def build_cell_mesh(geom: CellGeometry, target_h: float) -> CellMesh:
    """Conforming periodic triangulation of the unit cell with exact D4 symmetry."""
    if not 0.0 < target_h <= 0.1 + 1e-12:
        raise GeometryError(f"target_h={target_h!r} outside (0, 0.1]")
    a = geom.a
    if a > 0.5 - 2.0 * target_h:
        raise GeometryError(
            f"geometry infeasible: a={a!r} exceeds 0.5 - 2*target_h={0.5 - 2.0 * target_h!r}"
        )
    s = target_h / math.sqrt(2.0)
    wpts = _wedge_points(a, s)
    tri = Delaunay(wpts)
    wtris = tri.simplices
    if len(np.unique(wtris)) != len(wpts):
        raise GeometryError("wedge triangulation dropped points")

    # reflect into the eight wedges and merge identical vertices
    key_to_index: dict = {}
    verts: list = []
    tris = []
    for T in _D4:
        mapped = wpts @ T.T
        local = np.empty(len(mapped), dtype=int)
        for i, (u, v) in enumerate(mapped):
            key = (u + 0.0, v + 0.0)
            j = key_to_index.get(key)
            if j is None:
                j = len(verts)
                key_to_index[key] = j
                verts.append(key)
            local[i] = j
        t = local[wtris]
        if np.linalg.det(T) < 0:
            t = t[:, [0, 2, 1]]
        tris.append(t)
    rel = np.array(verts)
    vertices = CENTER + rel
    triangles = np.concatenate(tris)

    # counter-clockwise orientation
    p = vertices[triangles]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    flip = cross < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    if np.any(np.abs(cross) < 1e-14):
        raise GeometryError("degenerate triangle in cell mesh")

    # region tags
    dist = np.linalg.norm(rel, axis=1) - a
    on_or_in = dist <= 1e-12
    inside = on_or_in[triangles].all(axis=1)
    region = np.where(inside, INTERIOR, EXTERIOR)
    strictly_in = (dist < -1e-12)[triangles].any(axis=1)
    if np.any(strictly_in & ~inside):
        raise GeometryError("a triangle straddles the interface")

    # edges with their owning triangles
    local_edges = np.array([[0, 1], [1, 2], [2, 0]])
    e = triangles[:, local_edges].reshape(-1, 2)
    owner = np.repeat(np.arange(len(triangles)), 3)
    key = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if counts.max() > 2:
        raise GeometryError("non-manifold edge in cell mesh")

    # interface edges: shared by an interior and an exterior triangle
    iface, iface_ext = [], []
    edge_tris: dict = {}
    for k, slot in enumerate(inv):
        edge_tris.setdefault(slot, []).append(k)
    for slot, ks in edge_tris.items():
        if len(ks) != 2:
            continue
        t0, t1 = owner[ks[0]], owner[ks[1]]
        if region[t0] != region[t1]:
            ext_k = ks[0] if region[t0] == EXTERIOR else ks[1]
            i, j = e[ext_k]
            iface.append((j, i))  # reversed exterior orientation runs CCW around the centre
            iface_ext.append(owner[ext_k])
    iface = np.array(iface, dtype=int)
    iface_ext = np.array(iface_ext, dtype=int)
    order = np.argsort(np.arctan2(*(vertices[iface].mean(axis=1) - CENTER)[:, ::-1].T))
    iface, iface_ext = iface[order], iface_ext[order]
    d = vertices[iface[:, 1]] - vertices[iface[:, 0]]
    nrm = np.column_stack([d[:, 1], -d[:, 0]])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)

    # outer edges (boundary of the square)
    single = np.array([ks[0] for ks in edge_tris.values() if len(ks) == 1])
    outer = e[single]
    outer_tri = owner[single]
    mid = vertices[outer].mean(axis=1)
    on_square = (np.abs(mid[:, 0]) < 1e-12) | (np.abs(mid[:, 0] - 1) < 1e-12) | (np.abs(mid[:, 1]) < 1e-12) | (np.abs(mid[:, 1] - 1) < 1e-12)
    if not on_square.all():
        raise GeometryError("mesh has a free edge inside the cell")

    # periodic pairs: right -> left, top -> bottom
    index = {(float(x), float(y)): i for i, (x, y) in enumerate(vertices)}
    pairs = {}
    for i, (x, y) in enumerate(vertices):
        if x == 1.0:
            pairs[i] = index[(0.0, float(y))]
        elif y == 1.0:
            pairs[i] = index[(float(x), 0.0)]

    return CellMesh(
        vertices=vertices,
        triangles=triangles,
        region=region,
        interface_edges=iface,
        interface_normals=nrm,
        interface_exterior_tri=iface_ext,
        outer_edges=outer,
        outer_tri=outer_tri,
        periodic_pairs=pairs,
        geom=geom,
        target_h=float(target_h),
    )


def export_mesh(mesh: CellMesh, path, fields: dict | None = None) -> None:
    """Write the plain-text debug format, optionally with per-vertex fields."""
    lines = [f"# cell mesh a={mesh.geom.a!r} target_h={mesh.target_h!r}", f"vertices {mesh.n_vertices}"]
    lines += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.vertices)]
    lines.append(f"triangles {len(mesh.triangles)}")
    lines += [f"{i} {a} {b} {c} {r}" for i, ((a, b, c), r) in enumerate(zip(mesh.triangles, mesh.region))]
    lines.append(f"interface_edges {len(mesh.interface_edges)}")
    lines += [f"{i} {a} {b} {n[0]!r} {n[1]!r}" for i, ((a, b), n) in enumerate(zip(mesh.interface_edges, mesh.interface_normals))]
    lines.append(f"periodic_pairs {len(mesh.periodic_pairs)}")
    lines += [f"{s} {m}" for s, m in sorted(mesh.periodic_pairs.items())]
    for name, values in (fields or {}).items():
        values = np.asarray(values, dtype=float)
        lines.append(f"field {name} {len(values)}")
        lines += [f"{i} {v!r}" for i, v in enumerate(values)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def mesh_violations(mesh: CellMesh, tol: float = 1e-12) -> list[str]:
    """Check the structural invariants of a cell mesh; empty list when all hold."""
    out = []
    v, t = mesh.vertices, mesh.triangles
    area = mesh.areas
    if np.any(area <= 0):
        out.append("triangle with non-positive orientation")
    if abs(area.sum() - 1.0) > 1e-10:
        out.append(f"triangle areas sum to {area.sum()!r}")
    if np.any(v < -tol) or np.any(v > 1 + tol):
        out.append("vertex outside the unit square")
    rel = np.linalg.norm(v[mesh.interface_edges.ravel()] - CENTER, axis=1)
    if np.abs(rel - mesh.geom.a).max() > tol:
        out.append("interface vertex off the circle")
    for s_, m_ in mesh.periodic_pairs.items():
        d = v[s_] - v[m_]
        if not (np.allclose(d, (1.0, 0.0), atol=tol, rtol=0) or np.allclose(d, (0.0, 1.0), atol=tol, rtol=0)):
            out.append(f"periodic pair {s_}->{m_} is not a unit translate")
            break
    key = np.sort(t[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
    _, counts = np.unique(key, axis=0, return_counts=True)
    if counts.max() > 2:
        out.append("edge shared by more than two triangles")
    if np.sum(counts == 1) != len(mesh.outer_edges):
        out.append("free edge that is not on the cell boundary")
    dist = np.linalg.norm(v - CENTER, axis=1) - mesh.geom.a
    tri_d = dist[t]
    if np.any((tri_d.min(axis=1) < -tol) & (tri_d.max(axis=1) > tol)):
        out.append("triangle straddles the interface")
    return out
