"""Finite-difference validation of the renderer's analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import orbit_camera
from .field import FieldState, deform_limit_for, init_sphere
from .grid import build_grid
from .raster import RenderMaps, bin_and_sort, render_backward, render_forward
from .splat import build_scene, prefilter

MAX_RESOLUTION = 8  # the sweep is quadratic in parameter count

LOSS_KINDS = ("opacity", "depth", "normal")


@dataclass
class GradCheckReport:
    max_rel_error: dict        # loss kind -> worst relative error over all params
    tolerances: dict           # loss kind -> allowed error
    passed: bool


def _tolerance(kind: str) -> float:
    # opacity-only losses are order-independent, so they check tighter
    return 1e-4 if kind == "opacity" else 1e-3


def _make_problem(resolution: int, image_size: int, s: float, seed: int,
                  deformation: bool):
    rng = np.random.default_rng(seed)
    grid = build_grid(resolution)
    field = init_sphere(grid, 0.55)
    field.sdf = field.sdf + 0.08 * rng.standard_normal(grid.num_vertices)
    if deformation:
        limit = deform_limit_for(grid)
        field.deformation = rng.uniform(-0.4 * limit, 0.4 * limit,
                                        size=(grid.num_vertices, 3))
    field.steepness = s
    camera = orbit_camera(1, 8, radius=3.0, elevation_range=(15.0, 15.0),
                          width=image_size, height=image_size)
    return grid, field, camera


def _weighted_loss_maps(maps: RenderMaps, weights: RenderMaps, kind: str) -> float:
    if kind == "opacity":
        return float(np.sum(maps.opacity * weights.opacity))
    if kind == "depth":
        return float(np.sum(maps.depth * weights.depth))
    return float(np.sum(maps.normal * weights.normal))


def _loss_gradient_maps(weights: RenderMaps, kind: str, shape) -> RenderMaps:
    d = RenderMaps.zeros(*shape)
    if kind == "opacity":
        d.opacity = weights.opacity
    elif kind == "depth":
        d.depth = weights.depth
    else:
        d.normal = weights.normal
    return d


def check_gradients(resolution: int, image_size: int = 32, s: float = 20.0,
                    seed: int = 0, h: float = 1e-4, deformation: bool = True,
                    n_w: int = 5, corrupt: bool = False) -> GradCheckReport:
    """Compare render_backward against central finite differences.

    Runs one view of a perturbed sphere field and sweeps every SDF value (and
    deformation component) for losses touching each map in turn. The active set
    and tile bins are frozen at the base state so the comparison probes the
    smooth blending path, not the discrete gating. Early stopping is disabled
    for the same reason. ``corrupt`` deliberately skews the analytic gradient
    (detector self-test).
    """
    if resolution > MAX_RESOLUTION:
        raise ValueError(
            f"resolution {resolution} > {MAX_RESOLUTION}: the sweep cost is "
            "quadratic; use a coarser grid")
    grid, field, camera = _make_problem(resolution, image_size, s, seed, deformation)
    active = prefilter(grid, field, s)
    base_scene = build_scene(grid, field, camera, s, active=active)
    bins = bin_and_sort(base_scene, camera)

    rng = np.random.default_rng(seed + 1)
    weights = RenderMaps(
        normal=rng.standard_normal((image_size, image_size, 3)),
        depth=rng.standard_normal((image_size, image_size)),
        opacity=rng.standard_normal((image_size, image_size)),
    )

    def forward_loss(state: FieldState, kind: str) -> float:
        sc = build_scene(grid, state, camera, s, active=active)
        maps, _ = render_forward(sc, bins, camera, n_w=n_w, t_stop=0.0)
        return _weighted_loss_maps(maps, weights, kind)

    errors = {}
    n_verts = grid.num_vertices
    for kind in LOSS_KINDS:
        maps, saved = render_forward(base_scene, bins, camera, n_w=n_w,
                                     t_stop=0.0, save_state=True)
        d_maps = _loss_gradient_maps(weights, kind, (image_size, image_size))
        buffers = render_backward(saved, base_scene, grid, field, camera, d_maps)
        if corrupt:
            buffers.d_sdf = buffers.d_sdf * 1.01 + 1e-3

        fd_sdf = np.zeros(n_verts)
        for i in range(n_verts):
            st = field.copy()
            st.sdf[i] += h
            lp = forward_loss(st, kind)
            st.sdf[i] -= 2 * h
            lm = forward_loss(st, kind)
            fd_sdf[i] = (lp - lm) / (2 * h)

        analytic = [buffers.d_sdf]
        numeric = [fd_sdf]
        if deformation:
            fd_def = np.zeros((n_verts, 3))
            for i in range(n_verts):
                for c in range(3):
                    st = field.copy()
                    st.deformation[i, c] += h
                    lp = forward_loss(st, kind)
                    st.deformation[i, c] -= 2 * h
                    lm = forward_loss(st, kind)
                    fd_def[i, c] = (lp - lm) / (2 * h)
            analytic.append(buffers.d_deform.ravel())
            numeric.append(fd_def.ravel())

        ga = np.concatenate([a.ravel() for a in analytic])
        gn = np.concatenate([n.ravel() for n in numeric])
        scale = np.abs(gn).max() + 1e-12
        errors[kind] = float(np.abs(ga - gn).max() / scale)

    tol = {k: _tolerance(k) for k in LOSS_KINDS}
    passed = all(errors[k] <= tol[k] for k in LOSS_KINDS)
    return GradCheckReport(errors, tol, passed)
