"""Triangle mesh container, OBJ I/O, and mesh diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class TriangleMesh:
    """Indexed triangle soup. ``vertices`` is (V, 3) float64, ``triangles`` (F, 3) int64."""

    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def edge_counts(self):
        """Unique undirected edges and the number of triangles sharing each."""
        if self.is_empty:
            return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
        e = np.concatenate([self.triangles[:, [0, 1]],
                            self.triangles[:, [1, 2]],
                            self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        edges, counts = np.unique(e, axis=0, return_counts=True)
        return edges, counts

    def euler_characteristic(self) -> int:
        if self.is_empty:
            return 0
        used = np.unique(self.triangles)
        edges, _ = self.edge_counts()
        return int(len(used) - len(edges) + len(self.triangles))

    def is_watertight(self) -> bool:
        _, counts = self.edge_counts()
        return len(counts) > 0 and bool(np.all(counts == 2))


def export_obj(mesh: TriangleMesh, path) -> None:
    """Write a Wavefront OBJ file (``v`` records then ``f`` records, 1-based)."""
    lines = []
    for v in mesh.vertices:
        lines.append("v %.9g %.9g %.9g" % (v[0], v[1], v[2]))
    for t in mesh.triangles:
        lines.append("f %d %d %d" % (t[0] + 1, t[1] + 1, t[2] + 1))
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
        if lines:
            fh.write("\n")


def load_obj(path) -> TriangleMesh:
    verts, tris = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                tris.append(idx)
    return TriangleMesh(
        np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        np.asarray(tris, dtype=np.int64).reshape(-1, 3),
    )


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform area-weighted samples on the mesh surface, (n, 3)."""
    areas = mesh.triangle_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    probs = areas / total
    tri = rng.choice(len(areas), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def rasterize_mesh(mesh: TriangleMesh, camera):
    """Z-buffered flat-shaded rasterization of a triangle mesh.

    Returns (mask, depth, normal) images: boolean coverage, camera-space depth of the
    nearest triangle, and its world-space unit face normal. Used as the surface-limit
    oracle against the splatted maps.
    """
    H, W = camera.height, camera.width
    mask = np.zeros((H, W), dtype=bool)
    depth = np.full((H, W), np.inf)
    normal = np.zeros((H, W, 3))
    if mesh.is_empty:
        depth[:] = 0.0
        return mask, depth, normal

    pix, z, _ = camera.project_points(mesh.vertices)
    fa = np.cross(mesh.vertices[mesh.triangles[:, 1]] - mesh.vertices[mesh.triangles[:, 0]],
                  mesh.vertices[mesh.triangles[:, 2]] - mesh.vertices[mesh.triangles[:, 0]])
    norms = np.linalg.norm(fa, axis=1)

    for t in range(len(mesh.triangles)):
        i0, i1, i2 = mesh.triangles[t]
        za, zb, zc = z[i0], z[i1], z[i2]
        if min(za, zb, zc) <= camera.near or max(za, zb, zc) >= camera.far or norms[t] == 0:
            continue
        a, b, c = pix[i0], pix[i1], pix[i2]
        x0 = max(int(np.floor(min(a[0], b[0], c[0]))), 0)
        x1 = min(int(np.ceil(max(a[0], b[0], c[0]))), W - 1)
        y0 = max(int(np.floor(min(a[1], b[1], c[1]))), 0)
        y1 = min(int(np.ceil(max(a[1], b[1], c[1]))), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-12:
            continue
        u = ((xs - a[0]) * (c[1] - a[1]) - (ys - a[1]) * (c[0] - a[0])) / det
        v = ((xs - a[0]) * -(b[1] - a[1]) + (ys - a[1]) * (b[0] - a[0])) / det
        inside = (u >= 0) & (v >= 0) & (u + v <= 1)
        if not inside.any():
            continue
        denom = (1 - u - v) / za + u / zb + v / zc
        zp = 1.0 / denom
        sub_d = depth[y0:y1 + 1, x0:x1 + 1]
        upd = inside & (zp < sub_d)
        sub_d[upd] = zp[upd]
        mask[y0:y1 + 1, x0:x1 + 1][upd] = True
        normal[y0:y1 + 1, x0:x1 + 1][upd] = fa[t] / norms[t]
    depth[~mask] = 0.0
    return mask, depth, normal
