"""Tile-based forward rasterizer, exact-order reference renderer, and the
analytic backward pass from map gradients to per-vertex parameters."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field import EPS_NORMAL, tet_sdf_gradients
from .splat import ALPHA_CLIP, T_STOP, SplatScene
from . import kernels

TILE_SIZE = 16
DEFAULT_WINDOW = 5


def worker_count() -> int:
    env = os.environ.get("TETSPLAT_THREADS")
    if env:
        return max(1, int(env))
    if kernels.BACKEND_NAME == "python":
        return 1  # the GIL defeats threading in the fallback
    return min(8, os.cpu_count() or 1)


@dataclass
class RenderMaps:
    """Opacity-premultiplied normal/depth/opacity (and optional color) images."""

    normal: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray | None = None

    @classmethod
    def zeros(cls, height, width, with_color=False):
        return cls(np.zeros((height, width, 3)), np.zeros((height, width)),
                   np.zeros((height, width)),
                   np.zeros((height, width, 3)) if with_color else None)

    def max_abs_difference(self, other: "RenderMaps") -> float:
        d = max(np.abs(self.normal - other.normal).max(initial=0),
                np.abs(self.depth - other.depth).max(initial=0),
                np.abs(self.opacity - other.opacity).max(initial=0))
        if self.color is not None and other.color is not None:
            d = max(d, np.abs(self.color - other.color).max(initial=0))
        return float(d)


@dataclass
class TileBins:
    """Per-tile splat lists sorted by (tile id, quantized mean depth)."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    starts: np.ndarray  # (tiles_x * tiles_y + 1,)
    items: np.ndarray   # (M,) splat indices

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    def tile_list(self, tid: int) -> np.ndarray:
        return self.items[self.starts[tid]:self.starts[tid + 1]]

    def max_list_length(self) -> int:
        return int(np.diff(self.starts).max(initial=0))


@dataclass
class GradientBuffers:
    """Loss derivatives accumulated per grid vertex."""

    d_sdf: np.ndarray
    d_deform: np.ndarray
    d_color: np.ndarray | None = None

    def __iadd__(self, other):
        self.d_sdf += other.d_sdf
        self.d_deform += other.d_deform
        if self.d_color is not None and other.d_color is not None:
            self.d_color += other.d_color
        return self

    def scaled(self, w: float) -> "GradientBuffers":
        return GradientBuffers(self.d_sdf * w, self.d_deform * w,
                               None if self.d_color is None else self.d_color * w)


@dataclass
class SavedState:
    """Per-pixel contribution lists retained by the forward pass."""

    records: list  # (tile_id, counts, idx, alpha) per touched tile
    bins: TileBins
    n_w: int
    t_stop: float


def bin_and_sort(scene: SplatScene, camera, tile_size: int = TILE_SIZE) -> TileBins:
    """Replicate splats into overlapped tiles and sort by (tile id, depth).

    The sort key is the tile id with the mean depth quantized to 32-bit fixed
    point over [near, far]; the sort is stable, so equal keys keep splat order.
    """
    tiles_x = (camera.width + tile_size - 1) // tile_size
    tiles_y = (camera.height + tile_size - 1) // tile_size
    K = len(scene)
    if K == 0:
        starts = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
        return TileBins(tile_size, tiles_x, tiles_y, starts,
                        np.zeros(0, dtype=np.int64))

    tx0 = np.clip(np.floor(scene.bbox[:, 0] / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor(scene.bbox[:, 2] / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor(scene.bbox[:, 1] / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor(scene.bbox[:, 3] / tile_size), 0, tiles_y - 1).astype(np.int64)

    counts = (tx1 - tx0 + 1) * (ty1 - ty0 + 1)
    splat_ids = np.repeat(np.arange(K, dtype=np.int64), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(counts.sum(), dtype=np.int64) - offsets[splat_ids]
    nx = (tx1 - tx0 + 1)[splat_ids]
    tile_x = tx0[splat_ids] + local % nx
    tile_y = ty0[splat_ids] + local // nx
    tile_id = tile_y * tiles_x + tile_x

    span = camera.far - camera.near
    q = np.clip((scene.mean_depth - camera.near) / span, 0.0, 1.0)
    q = (q * (2**32 - 1)).astype(np.uint64)
    key = (tile_id.astype(np.uint64) << np.uint64(32)) | q[splat_ids]
    order = np.argsort(key, kind="stable")

    sorted_tiles = tile_id[order]
    starts = np.searchsorted(sorted_tiles, np.arange(tiles_x * tiles_y + 1))
    return TileBins(tile_size, tiles_x, tiles_y, starts.astype(np.int64),
                    splat_ids[order])


def _scene_arrays(scene: SplatScene):
    return (scene.proj, scene.depths, scene.f, scene.normals,
            scene.mean_depth, scene.colors, scene.bbox)


def render_forward(scene: SplatScene, bins: TileBins, camera,
                   n_w: int = DEFAULT_WINDOW, t_stop: float = T_STOP,
                   save_state: bool = False):
    """Tile-based forward pass. Returns (RenderMaps, SavedState | None)."""
    if n_w < 1:
        raise ValueError("resorting window must be >= 1")
    maps = RenderMaps.zeros(camera.height, camera.width, scene.colors is not None)
    touched = np.nonzero(np.diff(bins.starts) > 0)[0]
    backend = kernels.get_backend()
    args = _scene_arrays(scene)

    def run(tile_ids):
        return backend.forward_tiles(
            *args, bins.starts, bins.items, tile_ids, bins.tile_size,
            bins.tiles_x, camera.width, camera.height, n_w, _scene_s(scene),
            t_stop, ALPHA_CLIP, maps.normal, maps.depth, maps.opacity,
            maps.color, save_state)

    records = []
    nthreads = worker_count()
    if nthreads <= 1 or len(touched) < 2:
        records = run(touched)
    else:
        chunks = np.array_split(touched, min(nthreads * 4, len(touched)))
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            for part in pool.map(run, chunks):
                records.extend(part)
    saved = SavedState(records, bins, n_w, t_stop) if save_state else None
    return maps, saved


def render_reference(scene: SplatScene, camera) -> RenderMaps:
    """Oracle renderer: exact per-pixel depth ordering, no tiles, no early stop."""
    maps = RenderMaps.zeros(camera.height, camera.width, scene.colors is not None)
    backend = kernels.get_backend()
    args = _scene_arrays(scene)

    def run(rows):
        backend.reference_render(*args, camera.width, camera.height,
                                 _scene_s(scene), ALPHA_CLIP,
                                 int(rows[0]), int(rows[-1]) + 1,
                                 maps.normal, maps.depth, maps.opacity, maps.color)

    nthreads = worker_count()
    rows = np.arange(camera.height)
    if nthreads <= 1:
        run(rows)
    else:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            list(pool.map(run, np.array_split(rows, nthreads)))
    return maps


def _scene_s(scene: SplatScene) -> float:
    return float(scene.steepness)


def render_backward(saved: SavedState, scene: SplatScene, grid, field, camera,
                    d_maps: RenderMaps) -> GradientBuffers:
    """Exact reverse-mode pass: map gradients -> per-vertex SDF/deformation gradients."""
    for arr in (d_maps.normal, d_maps.depth, d_maps.opacity):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite incoming map gradients")
    K = len(scene)
    backend = kernels.get_backend()
    args = _scene_arrays(scene)
    with_color = scene.colors is not None and d_maps.color is not None

    def run(records):
        d_f = np.zeros((K, 4))
        d_proj = np.zeros((K, 4, 2))
        d_depths = np.zeros((K, 4))
        d_normals = np.zeros((K, 3))
        d_mean_depth = np.zeros(K)
        d_colors = np.zeros((K, 3)) if with_color else None
        backend.backward_tiles(
            *args, records, saved.bins.tile_size, saved.bins.tiles_x,
            camera.width, camera.height, _scene_s(scene), ALPHA_CLIP,
            d_maps.normal, d_maps.depth, d_maps.opacity,
            d_maps.color if with_color else None,
            d_f, d_proj, d_depths, d_normals, d_mean_depth, d_colors)
        return d_f, d_proj, d_depths, d_normals, d_mean_depth, d_colors

    nthreads = worker_count()
    if nthreads <= 1 or len(saved.records) < 2:
        parts = [run(saved.records)]
    else:
        chunks = [c for c in np.array_split(np.arange(len(saved.records)),
                                            nthreads) if len(c)]
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            parts = list(pool.map(lambda c: run([saved.records[i] for i in c]),
                                  chunks))

    d_f = sum(p[0] for p in parts)
    d_proj = sum(p[1] for p in parts)
    d_depths = sum(p[2] for p in parts)
    d_normals = sum(p[3] for p in parts)
    d_mean_depth = sum(p[4] for p in parts)
    d_colors = sum(p[5] for p in parts) if with_color else None

    return splat_grads_to_vertices(scene, grid, field, camera, d_f, d_proj,
                                   d_depths, d_normals, d_mean_depth, d_colors)


def splat_grads_to_vertices(scene: SplatScene, grid, field, camera,
                            d_f, d_proj, d_depths, d_normals, d_mean_depth,
                            d_colors=None) -> GradientBuffers:
    """Chain per-splat gradients through projection and the per-tet normal solve
    into per-vertex SDF and deformation gradients."""
    N = grid.num_vertices
    buffers = GradientBuffers(np.zeros(N), np.zeros((N, 3)))
    K = len(scene)
    if K == 0:
        return buffers

    positions = field.deformed_positions(grid)
    verts = scene.vert_ids

    d_f = d_f.copy()
    d_depths = d_depths + d_mean_depth[:, None] / 4.0
    d_pos_splat = np.zeros((K, 4, 3))

    # normal chain: n = g / |g|, g the in-tet field gradient from the 4x4 solve
    tet_pos = positions[verts]
    g = tet_sdf_gradients(tet_pos, scene.f)
    gnorm = np.linalg.norm(g, axis=1)
    defined = gnorm >= EPS_NORMAL
    if defined.any():
        n = np.zeros_like(g)
        n[defined] = g[defined] / gnorm[defined, None]
        d_g = np.zeros_like(g)
        dn = d_normals[defined]
        proj_perp = dn - n[defined] * np.einsum("ij,ij->i", n[defined], dn)[:, None]
        d_g[defined] = proj_perp / gnorm[defined, None]
        # x = B^{-1} f  =>  dL/df = B^{-T} (d_g, 0);  dL/dv_i = -(dL/df)_i * g
        B = np.concatenate([tet_pos, np.ones((K, 4, 1))], axis=2)
        rhs = np.concatenate([d_g, np.zeros((K, 1))], axis=1)
        df_from_n = np.linalg.solve(np.transpose(B, (0, 2, 1)), rhs[..., None])[..., 0]
        d_f += df_from_n
        d_pos_splat -= df_from_n[..., None] * g[:, None, :]

    # camera chain: pixel = (fx X / Z + cx, fy Y / Z + cy), depth = Z
    pc = camera.to_camera(positions)[verts]  # (K, 4, 3)
    X, Y, Z = pc[..., 0], pc[..., 1], pc[..., 2]
    dpx, dpy = d_proj[..., 0], d_proj[..., 1]
    d_pc = np.stack([
        dpx * camera.fx / Z,
        dpy * camera.fy / Z,
        -dpx * camera.fx * X / Z**2 - dpy * camera.fy * Y / Z**2 + d_depths,
    ], axis=-1)
    d_pos_splat += d_pc @ camera.rotation

    np.add.at(buffers.d_sdf, verts, d_f)
    np.add.at(buffers.d_deform, verts, d_pos_splat)
    if d_colors is not None:
        buffers.d_color = np.zeros((grid.num_tets, 3))
        np.add.at(buffers.d_color, scene.tet_ids, d_colors)
    return buffers
