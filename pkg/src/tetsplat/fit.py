"""Inverse rendering: fit the grid field to sphere-traced target images."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

from .camera import orbit_camera
from .field import (AnalyticShape, FieldState, analytic_sdf, init_from_shape,
                    sample_shape_surface)
from .grid import build_grid, marching_tetrahedra
from .losses import eikonal_loss, map_mse_loss, normal_consistency_loss
from .mesh import sample_surface
from .raster import (RenderMaps, bin_and_sort, render_backward, render_forward,
                     GradientBuffers)
from .splat import EmptySceneError, build_scene, coarse_to_fine_filter

S_RATIO = 5.0
S_START = 20.0


def s_schedule(iteration: int, s_ratio: float = S_RATIO,
               s_start: float = S_START) -> float:
    """Sharpness ramp: s = i / s_ratio + s_start."""
    return iteration / s_ratio + s_start


@dataclass
class FitConfig:
    resolution: int = 64
    image_size: int = 128
    n_views: int = 32
    batch_size: int = 4
    iterations: int = 1000
    lr_sdf: float = 1e-2
    lr_deform: float = 1e-3
    betas: tuple = (0.9, 0.99)
    s_ratio: float = S_RATIO
    s_start: float = S_START
    lambda_eik: float = 1000.0
    lambda_nc: float = 1000.0
    map_weights: dict = dc_field(default_factory=lambda: {
        "normal": 2000.0, "depth": 2000.0, "opacity": 2000.0})
    eikonal_scope: str = "active"  # or "all"
    use_deformation: bool = True
    n_w: int = 5
    camera_radius: float = 3.0
    fov_deg: float = 40.0
    elevation_range: tuple = (-30.0, 30.0)
    seed: int = 0
    trace_every: int = 10

    def __post_init__(self):
        if self.eikonal_scope not in ("active", "all"):
            raise ValueError(f"eikonal_scope must be active|all, "
                             f"got {self.eikonal_scope!r}")


@dataclass
class FitTrace:
    iterations: list
    final_loss: float
    final_s: float


class Adam:
    """Plain Adam over a list of arrays."""

    def __init__(self, shapes, lrs, betas=(0.9, 0.99), eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for p, g, m, v, lr in zip(params, grads, self.m, self.v, self.lrs):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def render_target(shape: AnalyticShape, camera, max_steps: int = 64,
                  eps: float = 1e-4, normal_h: float = 1e-5) -> RenderMaps:
    """Sphere-trace the analytic SDF into opacity-premultiplied target maps.

    The mask is binary; depth is camera-space z at the hit; normals come from
    central differences of the SDF.
    """
    dirs = camera.pixel_rays().reshape(-1, 3)
    origin = camera.position
    t = np.full(len(dirs), camera.near)
    hit = np.zeros(len(dirs), dtype=bool)
    for _ in range(max_steps):
        p = origin + t[:, None] * dirs
        d = analytic_sdf(shape, p)
        hit |= np.abs(d) < eps
        marching = ~hit & (t <= camera.far)
        if not marching.any():
            break
        t[marching] += d[marching]
    p = origin + t[:, None] * dirs
    mask = hit & (t <= camera.far)

    h, w = camera.height, camera.width
    maps = RenderMaps.zeros(h, w)
    maps.opacity = mask.astype(np.float64).reshape(h, w)
    z = camera.to_camera(p)[:, 2]
    maps.depth = (z * mask).reshape(h, w)

    if mask.any():
        ph = p[mask]
        n = np.zeros((mask.sum(), 3))
        for c in range(3):
            off = np.zeros(3)
            off[c] = normal_h
            n[:, c] = (analytic_sdf(shape, ph + off)
                       - analytic_sdf(shape, ph - off)) / (2 * normal_h)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        nm = np.zeros((len(dirs), 3))
        nm[mask] = n
        maps.normal = nm.reshape(h, w, 3)
    return maps


def make_targets(shape: AnalyticShape, config: FitConfig):
    cams = [orbit_camera(i, config.n_views, radius=config.camera_radius,
                         elevation_range=config.elevation_range,
                         fov_deg=config.fov_deg,
                         width=config.image_size, height=config.image_size)
            for i in range(config.n_views)]
    return cams, [render_target(shape, c) for c in cams]


def fit_field(grid, field: FieldState, cameras, targets, config: FitConfig,
              trace_path=None):
    """Adam-optimize SDF (and deformation) against the target maps.

    Deterministic under a fixed config seed: view batches come from a dedicated
    generator and gradient accumulation runs in a fixed order.
    """
    rng = np.random.default_rng(config.seed)
    params = [field.sdf, field.deformation]
    opt = Adam([p.shape for p in params],
               [config.lr_sdf, config.lr_deform if config.use_deformation else 0.0],
               config.betas)
    trace = []
    trace_fh = open(trace_path, "w") if trace_path else None
    s = config.s_start

    try:
        for it in range(config.iterations):
            s = s_schedule(it, config.s_ratio, config.s_start)
            field.steepness = s
            try:
                active, _ = coarse_to_fine_filter(grid, field, s)
            except EmptySceneError:
                raise RuntimeError(
                    f"iteration {it}: every tet filtered out (field collapsed)")

            batch = rng.choice(config.n_views, size=config.batch_size,
                               replace=False)
            total = 0.0
            comp_sums = {}
            grads = GradientBuffers(np.zeros(grid.num_vertices),
                                    np.zeros((grid.num_vertices, 3)))
            n_used = 0
            for vi in sorted(int(v) for v in batch):
                scene = build_scene(grid, field, cameras[vi], s, active=active)
                if len(scene) == 0:
                    continue
                bins = bin_and_sort(scene, cameras[vi])
                maps, saved = render_forward(scene, bins, cameras[vi],
                                             n_w=config.n_w, save_state=True)
                loss, comps, d_maps = map_mse_loss(maps, targets[vi],
                                                   config.map_weights)
                total += loss
                for k, v in comps.items():
                    comp_sums[k] = comp_sums.get(k, 0.0) + v
                grads += render_backward(saved, scene, grid, field,
                                         cameras[vi], d_maps)
                n_used += 1
            if n_used == 0:
                raise RuntimeError(f"iteration {it}: no view saw any splat")

            if config.lambda_eik > 0:
                scope = active if config.eikonal_scope == "active" \
                    else np.arange(grid.num_tets)
                le, ge = eikonal_loss(grid, field, scope)
                total += config.lambda_eik * le
                comp_sums["eikonal"] = le
                grads += ge.scaled(config.lambda_eik)
            if config.lambda_nc > 0:
                ln, gn = normal_consistency_loss(grid, field)
                total += config.lambda_nc * ln
                comp_sums["normal_consistency"] = ln
                grads += gn.scaled(config.lambda_nc)

            if not math.isfinite(total):
                raise RuntimeError(
                    f"iteration {it}: non-finite loss {total} "
                    f"(components {comp_sums})")

            g_def = grads.d_deform if config.use_deformation \
                else np.zeros_like(grads.d_deform)
            opt.step(params, [grads.d_sdf, g_def])
            field.clamp_deformation()

            if it % config.trace_every == 0 or it == config.iterations - 1:
                row = {"iteration": it, "s": s, "loss": total,
                       "active_tets": int(len(active)),
                       "max_abs_sdf": float(np.abs(field.sdf).max())}
                row.update(comp_sums)
                trace.append(row)
                if trace_fh:
                    trace_fh.write(json.dumps(row) + "\n")
                    trace_fh.flush()
    finally:
        if trace_fh:
            trace_fh.close()
    return FitTrace(trace, trace[-1]["loss"] if trace else float("nan"), s)


def run_fit(target_shape: AnalyticShape, config: FitConfig,
            init_shape: AnalyticShape | None = None, trace_path=None):
    """End-to-end convenience wrapper: grid, init, targets, optimize."""
    grid = build_grid(config.resolution)
    if init_shape is None:
        init_shape = AnalyticShape("sphere", (0.5,))
    field = init_from_shape(grid, init_shape)
    cameras, targets = make_targets(target_shape, config)
    trace = fit_field(grid, field, cameras, targets, config, trace_path)
    return grid, field, trace


def chamfer_distance(mesh, shape: AnalyticShape, n_samples: int = 20000,
                     seed: int = 0) -> float:
    """Symmetric Chamfer distance between a mesh and an analytic surface.

    Mesh-to-surface uses the exact |sdf|; surface-to-mesh uses nearest sampled
    mesh point. Empty meshes give inf.
    """
    if len(mesh.triangles) == 0:
        return float("inf")
    rng = np.random.default_rng(seed)
    mesh_pts = sample_surface(mesh, n_samples, rng)
    d_ms = np.abs(analytic_sdf(shape, mesh_pts))
    surf_pts = sample_shape_surface(shape, n_samples, rng)
    d_sm, _ = cKDTree(mesh_pts).query(surf_pts)
    return float(d_ms.mean()) + float(d_sm.mean())


def extract_mesh(grid, field):
    return marching_tetrahedra(grid, field)
