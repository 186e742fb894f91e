"""Per-tetrahedron splat math: opacity conversion, pre-filtering, barycentrics,
perspective correction and ray-tet intersection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import camera as cam
from .field import tet_normals, tet_sdf_gradients

T_FILTER = 1.0 / 255.0     # pre-filter threshold on the opacity upper bound
ALPHA_CLIP = 1.0 - 1e-4    # cap keeping transmittance finite at high steepness
T_STOP = 1e-4              # early-stop transmittance in the forward pass
EPS_AREA = 1e-12           # degenerate projected-triangle area threshold

# local vertex triples of the four tet faces
FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]], dtype=np.int64)


class EmptySceneError(RuntimeError):
    """No tetrahedron survives pre-filtering."""


def _softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 30, x, np.log1p(np.exp(np.minimum(x, 30))))


def sigmoid(x, s: float = 1.0):
    """Numerically stable logistic 1 / (1 + exp(-s x))."""
    z = np.asarray(s * x, dtype=np.float64)
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def alpha_max(f, s: float):
    """Opacity upper bound from the extreme SDF values of a tet's vertices.

    f may be (4,) for one tet or (K, 4) batched.
    """
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    a = s * f.max(axis=1)
    b = s * f.min(axis=1)
    # Phi(b)/Phi(a) computed in log space to survive large |s f|
    ratio = np.exp(_softplus(-a) - _softplus(-b))
    out = np.maximum(1.0 - ratio, 0.0)
    return float(out[0]) if single else out


def opacity(f_prev: float, f_next: float, s: float) -> float:
    """Eq.-style NeuS opacity of one tet along one ray, clamped to [0, ALPHA_CLIP]."""
    a = s * f_prev
    b = s * f_next
    ratio = np.exp(float(_softplus(-a) - _softplus(-b)))
    return float(np.clip(1.0 - ratio, 0.0, ALPHA_CLIP))


def prefilter(grid, field, s: float, threshold: float = T_FILTER) -> np.ndarray:
    """Indices of tets whose opacity upper bound reaches `threshold`."""
    amax = alpha_max(field.sdf[grid.tets], s)
    return np.nonzero(amax >= threshold)[0]


def active_aabb(grid, field, active: np.ndarray, margin: float = 0.1):
    pos = field.deformed_positions(grid)[grid.tets[active]].reshape(-1, 3)
    lo, hi = pos.min(axis=0), pos.max(axis=0)
    pad = margin * (hi - lo)
    return np.stack([lo - pad, hi + pad])


def rescale_grid_to_box(grid, box):
    """Same connectivity with the canonical cube mapped affinely onto `box`."""
    from .grid import TetrahedralGrid
    lo, hi = box
    pos = (grid.rest_positions + 1.0) / 2.0 * (hi - lo) + lo
    return TetrahedralGrid(pos, grid.tets, grid.edges, grid.incidence_starts,
                           grid.incidence_items, grid.resolution)


def coarse_to_fine_filter(grid, field, s: float, threshold: float = T_FILTER,
                          margin: float = 0.1, field_fn=None):
    """Two-round pre-filtering: full-grid pass, AABB of survivors (plus margin),
    then a second pass on the grid rescaled to that box.

    With direct per-vertex parameters the SDF values travel with their vertices,
    so the second round only differs when `field_fn` (a positional SDF callable)
    is supplied to resample the field on the rescaled grid. Returns
    (active indices, box); the rescaled state is available via
    `rescale_grid_to_box` when a caller adopts the box.
    """
    active = prefilter(grid, field, s, threshold)
    if len(active) == 0:
        raise EmptySceneError("pre-filtering removed every tetrahedron")
    box = active_aabb(grid, field, active, margin)
    if field_fn is not None:
        from .field import FieldState
        fine = rescale_grid_to_box(grid, box)
        state = FieldState(field_fn(fine.rest_positions),
                           np.zeros_like(fine.rest_positions), field.deform_limit)
        active = prefilter(fine, state, s, threshold)
    return active, box


def barycentric_2d(tri, pixel):
    """2D barycentric coordinates (u', v') of `pixel` in `tri`; None when the
    pixel is outside or the triangle is degenerate. Boundary counts as inside."""
    a, b, c = np.asarray(tri, dtype=np.float64)
    p = np.asarray(pixel, dtype=np.float64)
    m00, m01 = b[0] - a[0], c[0] - a[0]
    m10, m11 = b[1] - a[1], c[1] - a[1]
    det = m00 * m11 - m01 * m10
    if abs(det) < 2 * EPS_AREA:  # det = 2 * signed area
        return None
    rx, ry = p[0] - a[0], p[1] - a[1]
    u = (m11 * rx - m01 * ry) / det
    v = (-m10 * rx + m00 * ry) / det
    if u < 0 or v < 0 or u + v > 1:
        return None
    return u, v


def perspective_correct(u_p: float, v_p: float, za: float, zb: float, zc: float):
    """Depth-corrected barycentrics and the interpolated depth z_p."""
    w0 = (1.0 - u_p - v_p) / za
    w1 = u_p / zb
    w2 = v_p / zc
    S = w0 + w1 + w2
    return w1 / S, w2 / S, 1.0 / S


@dataclass
class TetSplat:
    """One projected tetrahedron ready for blending."""

    tet_index: int
    proj: np.ndarray        # (4, 2) pixel coordinates
    depths: np.ndarray      # (4,) camera-space z
    f: np.ndarray           # (4,) SDF values
    normal: np.ndarray      # (3,) unit world-frame normal (zero when undefined)
    mean_depth: float
    alpha_max: float
    color: np.ndarray | None = None


def intersect_splat(splat: TetSplat, pixel):
    """SDF values (f_prev, f_next) at the ray's entry/exit through the tet.

    Tests the pixel against the four projected faces; perspective-corrected
    interpolation gives (f, z) per containing face, ordered by z. Fewer than two
    containing faces (grazing numerics) yields None; more than two (edge-on)
    keeps the nearest and farthest.
    """
    hits = []
    for face in FACES:
        bc = barycentric_2d(splat.proj[face], pixel)
        if bc is None:
            continue
        u_p, v_p = bc
        za, zb, zc = splat.depths[face]
        u, v, zp = perspective_correct(u_p, v_p, za, zb, zc)
        fa, fb, fc = splat.f[face]
        hits.append((zp, (1 - u - v) * fa + u * fb + v * fc))
    if len(hits) < 2:
        return None
    hits.sort(key=lambda h: h[0])
    return hits[0][1], hits[-1][1]


@dataclass
class SplatScene:
    """Culled, pre-filtered splats of one view as flat arrays for the kernels."""

    tet_ids: np.ndarray      # (K,) source tet index
    vert_ids: np.ndarray     # (K, 4) source vertex ids
    proj: np.ndarray         # (K, 4, 2)
    depths: np.ndarray       # (K, 4)
    f: np.ndarray            # (K, 4)
    normals: np.ndarray      # (K, 3)
    mean_depth: np.ndarray   # (K,)
    alpha_max: np.ndarray    # (K,)
    bbox: np.ndarray         # (K, 4) pixel-space xmin, ymin, xmax, ymax
    steepness: float = 1.0
    colors: np.ndarray | None = None

    def __len__(self):
        return len(self.tet_ids)

    def splat(self, i: int) -> TetSplat:
        return TetSplat(int(self.tet_ids[i]), self.proj[i], self.depths[i],
                        self.f[i], self.normals[i], float(self.mean_depth[i]),
                        float(self.alpha_max[i]),
                        None if self.colors is None else self.colors[i])


def build_scene(grid, field, camera, s: float, active=None,
                colors=None, threshold: float = T_FILTER) -> SplatScene:
    """Project the active tets into a SplatScene for one camera."""
    if active is None:
        active = prefilter(grid, field, s, threshold)
    active = np.asarray(active, dtype=np.int64)
    positions = field.deformed_positions(grid)
    pix, z, _ = camera.project_points(positions)

    tets = grid.tets[active]
    proj = pix[tets]
    depths = z[tets]

    # frustum culling, near-plane stragglers included
    dmin = depths.min(axis=1)
    keep = (dmin > camera.near) & (dmin <= camera.far)
    xmin, xmax = proj[..., 0].min(axis=1), proj[..., 0].max(axis=1)
    ymin, ymax = proj[..., 1].min(axis=1), proj[..., 1].max(axis=1)
    keep &= (xmax >= 0) & (xmin <= camera.width) & (ymax >= 0) & (ymin <= camera.height)

    active = active[keep]
    tets = tets[keep]
    proj = np.ascontiguousarray(proj[keep])
    depths = np.ascontiguousarray(depths[keep])
    f = np.ascontiguousarray(field.sdf[tets])

    g = tet_sdf_gradients(positions[tets], f) if len(tets) else np.zeros((0, 3))
    normals, _ = tet_normals(g)
    bbox = np.stack([xmin[keep], ymin[keep], xmax[keep], ymax[keep]], axis=1)

    return SplatScene(
        tet_ids=active,
        vert_ids=tets,
        proj=proj,
        depths=depths,
        f=f,
        normals=normals,
        mean_depth=depths.mean(axis=1),
        alpha_max=alpha_max(f, s) if len(tets) else np.zeros(0),
        bbox=np.ascontiguousarray(bbox),
        steepness=float(s),
        colors=None if colors is None else np.ascontiguousarray(colors[active]),
    )
