"""Structured tetrahedral grid over [-1,1]^3 and Marching Tetrahedra extraction.

The grid splits every axis-aligned cell into 6 tetrahedra with the Kuhn
(Freudenthal) subdivision, which adds no vertices and triangulates shared cube
faces identically from both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh

# Kuhn subdivision: the six tets around the main diagonal (0,0,0)-(1,1,1) of a
# cell, one per permutation of the axes. Local corner index = x + 2y + 4z.
_AXIS_PERMS = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]


@dataclass(frozen=True)
class TetrahedralGrid:
    """Static connectivity of the deformable grid.

    rest_positions: (N, 3) canonical vertex positions in [-1,1]^3.
    tets: (K, 4) vertex indices, consistently oriented (positive signed volume).
    edges: (E, 2) unique sorted vertex index pairs.
    incidence_starts / incidence_items: CSR layout of vertex -> incident tets.
    resolution: cells per axis.
    """

    rest_positions: np.ndarray
    tets: np.ndarray
    edges: np.ndarray
    incidence_starts: np.ndarray
    incidence_items: np.ndarray
    resolution: int

    def tets_of_vertex(self, v: int) -> np.ndarray:
        return self.incidence_items[self.incidence_starts[v]:
                                    self.incidence_starts[v + 1]]

    @property
    def num_vertices(self) -> int:
        return len(self.rest_positions)

    @property
    def num_tets(self) -> int:
        return len(self.tets)

    @property
    def cell_edge(self) -> float:
        return 2.0 / self.resolution


def signed_volumes(positions: np.ndarray, tets: np.ndarray) -> np.ndarray:
    a = positions[tets[:, 0]]
    e1 = positions[tets[:, 1]] - a
    e2 = positions[tets[:, 2]] - a
    e3 = positions[tets[:, 3]] - a
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


def build_grid(resolution: int) -> TetrahedralGrid:
    """Build the Kuhn-subdivided grid spanning [-1,1]^3 with `resolution` cells per axis."""
    if resolution < 1:
        raise ValueError(f"resolution must be >= 1, got {resolution}")
    R = resolution
    n = R + 1
    axis = np.linspace(-1.0, 1.0, n)
    zz, yy, xx = np.meshgrid(axis, axis, axis, indexing="ij")
    positions = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)

    def vid(ix, iy, iz):
        return ix + n * iy + n * n * iz

    ix, iy, iz = np.meshgrid(np.arange(R), np.arange(R), np.arange(R), indexing="ij")
    base = np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)  # (C, 3)

    tets = []
    for p in _AXIS_PERMS:
        c0 = np.zeros(3, dtype=np.int64)
        c1 = c0.copy()
        c1[p[0]] = 1
        c2 = c1.copy()
        c2[p[1]] = 1
        c3 = np.ones(3, dtype=np.int64)
        corners = np.stack([c0, c1, c2, c3])  # (4, 3)
        ids = base[:, None, :] + corners[None, :, :]  # (C, 4, 3)
        tets.append(vid(ids[..., 0], ids[..., 1], ids[..., 2]))
    tets = np.stack(tets, axis=1).reshape(-1, 4)  # 6 tets per cell, cell-major

    vols = signed_volumes(positions, tets)
    flip = vols < 0
    tets[flip] = tets[flip][:, [0, 1, 3, 2]]

    # Kuhn edges connect each vertex to neighbors along 7 offsets: the 3 axes,
    # the 3 face diagonals through (1,1,0)-type corners, and the main diagonal.
    offsets = [(1, 0, 0), (0, 1, 0), (0, 0, 1),
               (1, 1, 0), (0, 1, 1), (1, 0, 1), (1, 1, 1)]
    idx = np.arange(n)
    gx, gy, gz = np.meshgrid(idx, idx, idx, indexing="ij")
    edge_list = []
    for ox, oy, oz in offsets:
        m = (gx + ox < n) & (gy + oy < n) & (gz + oz < n)
        a = vid(gx[m], gy[m], gz[m])
        b = vid(gx[m] + ox, gy[m] + oy, gz[m] + oz)
        edge_list.append(np.stack([a, b], axis=1))
    edges = np.concatenate(edge_list)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    flat = tets.ravel()
    order = np.argsort(flat, kind="stable")
    items = order // 4  # tet index of each (tet, corner) slot
    starts = np.searchsorted(flat[order], np.arange(len(positions) + 1))

    return TetrahedralGrid(positions, tets, edges, starts, items, R)


def _edge_crossings(positions, f, va, vb):
    """Zero crossings on edges (va, vb): p = (f_b v_a - f_a v_b) / (f_b - f_a).

    Endpoints with f exactly 0 snap to the endpoint so coincident crossings from
    different edges weld exactly.
    """
    fa = f[va][:, None]
    fb = f[vb][:, None]
    p = (fb * positions[va] - fa * positions[vb]) / (fb - fa)
    a_zero = (fa == 0)[:, 0]
    b_zero = (fb == 0)[:, 0]
    p[a_zero] = positions[va[a_zero]]
    p[b_zero] = positions[vb[b_zero]]
    return p


def marching_tetrahedra(grid: TetrahedralGrid, field) -> TriangleMesh:
    """Extract the zero-level set of the per-vertex field as a triangle mesh.

    Sign convention: f < 0 is inside, f >= 0 outside (f = 0 counts as positive).
    Each sign-crossing tet emits 1 triangle (1-vs-3 split) or 2 (2-vs-2 split);
    crossing vertices on shared edges are deduplicated so closed level sets give
    a watertight mesh. Triangles wind so their normal points along the tet's
    field gradient (out of the negative region).
    """
    positions = field.deformed_positions(grid)
    f = np.asarray(field.sdf, dtype=np.float64)
    neg = f[grid.tets] < 0  # (K, 4)
    ncount = neg.sum(axis=1)

    cross_edges = []    # global sorted vertex pairs, one row per crossing slot
    single_slices = []  # (start, count, tet ids) for 1-vs-3 splits
    quad_slice = None   # (start, count, tet ids) for 2-vs-2 splits
    offset = 0

    # 1-vs-3 splits: crossings on the three edges incident to the lone vertex.
    for count, lone_neg in ((1, True), (3, False)):
        sel = np.nonzero(ncount == count)[0]
        if len(sel) == 0:
            continue
        tets = grid.tets[sel]
        lone_mask = neg[sel] if lone_neg else ~neg[sel]
        m = np.argmax(lone_mask, axis=1)
        others = np.argsort(lone_mask, axis=1, kind="stable")[:, :3]  # the three same-sign verts
        va = tets[np.arange(len(sel)), m]
        for j in range(3):
            vb = tets[np.arange(len(sel)), others[:, j]]
            cross_edges.append(np.sort(np.stack([va, vb], axis=1), axis=1))
        single_slices.append((offset, len(sel), sel))
        offset += 3 * len(sel)

    # 2-vs-2 splits: a quad through the four mixed-sign edges.
    sel = np.nonzero(ncount == 2)[0]
    if len(sel) > 0:
        tets = grid.tets[sel]
        order = np.argsort(~neg[sel], axis=1, kind="stable")  # negatives first
        i_, j_, k_, l_ = (tets[np.arange(len(sel)), order[:, c]] for c in range(4))
        # quad perimeter ik -> il -> jl -> jk (adjacent crossings share a parent vertex)
        for a, b in ((i_, k_), (i_, l_), (j_, l_), (j_, k_)):
            cross_edges.append(np.sort(np.stack([a, b], axis=1), axis=1))
        quad_slice = (offset, len(sel), sel)
        offset += 4 * len(sel)

    if offset == 0:
        return TriangleMesh()

    cross_edges = np.concatenate(cross_edges)
    uniq, inverse = np.unique(cross_edges, axis=0, return_inverse=True)
    verts = _edge_crossings(positions, f, uniq[:, 0], uniq[:, 1])

    triangles = []
    tet_of_tri = []
    for start, n_this, sel_t in single_slices:
        idx = start + np.arange(n_this)
        triangles.append(np.stack([inverse[idx], inverse[idx + n_this],
                                   inverse[idx + 2 * n_this]], axis=1))
        tet_of_tri.append(sel_t)
    if quad_slice is not None:
        start, n_this, sel_q = quad_slice
        idx = start + np.arange(n_this)
        ik, il, jl, jk = idx, idx + n_this, idx + 2 * n_this, idx + 3 * n_this
        # split along the shorter diagonal; ties by smaller parent vertex index
        d1 = np.linalg.norm(verts[inverse[ik]] - verts[inverse[jl]], axis=1)
        d2 = np.linalg.norm(verts[inverse[il]] - verts[inverse[jk]], axis=1)
        key1 = np.minimum(cross_edges[ik][:, 0], cross_edges[jl][:, 0])
        key2 = np.minimum(cross_edges[il][:, 0], cross_edges[jk][:, 0])
        use1 = np.where(np.isclose(d1, d2), key1 <= key2, d1 < d2)
        t1 = np.where(use1[:, None],
                      np.stack([inverse[ik], inverse[il], inverse[jl]], axis=1),
                      np.stack([inverse[ik], inverse[il], inverse[jk]], axis=1))
        t2 = np.where(use1[:, None],
                      np.stack([inverse[ik], inverse[jl], inverse[jk]], axis=1),
                      np.stack([inverse[il], inverse[jl], inverse[jk]], axis=1))
        triangles.extend([t1, t2])
        tet_of_tri.extend([sel_q, sel_q])

    triangles = np.concatenate(triangles)
    tet_of_tri = np.concatenate(tet_of_tri)

    # orient against the per-tet field gradient
    from .field import tet_sdf_gradients
    g = tet_sdf_gradients(positions[grid.tets[tet_of_tri]], f[grid.tets[tet_of_tri]])
    a = verts[triangles[:, 0]]
    n_tri = np.cross(verts[triangles[:, 1]] - a, verts[triangles[:, 2]] - a)
    flip = np.einsum("ij,ij->i", n_tri, g) < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    # weld crossings that collapsed onto an f == 0 grid vertex, then drop the
    # degenerate slivers they produce
    uniq_pos, remap = np.unique(verts, axis=0, return_inverse=True)
    triangles = remap[triangles]
    distinct = ((triangles[:, 0] != triangles[:, 1])
                & (triangles[:, 1] != triangles[:, 2])
                & (triangles[:, 0] != triangles[:, 2]))
    a = uniq_pos[triangles[:, 0]]
    area2 = np.linalg.norm(np.cross(uniq_pos[triangles[:, 1]] - a,
                                    uniq_pos[triangles[:, 2]] - a), axis=1)
    triangles = triangles[distinct & (area2 > 1e-14)]

    return TriangleMesh(uniq_pos, triangles.astype(np.int64))
