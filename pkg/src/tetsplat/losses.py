"""Eikonal and normal-consistency regularizers and MSE map losses.

The per-tet sweeps live in the kernel backends (compiled or numpy); this module
handles parameter plumbing and the image-space MSE losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import EPS_NORMAL
from .raster import GradientBuffers, RenderMaps


@dataclass
class LossReport:
    total: float
    components: dict
    weights: dict


def eikonal_loss(grid, field, tet_set) -> tuple[float, GradientBuffers]:
    """Unit-gradient penalty sum_k (|g_k| - 1)^2 over the given tets."""
    buffers = GradientBuffers(np.zeros(grid.num_vertices),
                              np.zeros((grid.num_vertices, 3)))
    tet_set = np.ascontiguousarray(tet_set, dtype=np.int64)
    if len(tet_set) == 0:
        return 0.0, buffers
    positions = np.ascontiguousarray(field.deformed_positions(grid))
    loss = kernels.get_backend().eikonal_kernel(
        positions, field.sdf, grid.tets, tet_set, EPS_NORMAL,
        buffers.d_sdf, buffers.d_deform)
    return float(loss), buffers


def normal_consistency_loss(grid, field) -> tuple[float, GradientBuffers]:
    """Cosine-misalignment penalty between vertex normals across grid edges.

    Vertex normals are normalized unweighted averages of incident tet unit
    normals; tets with vanishing gradient and vertices with no defined normal
    drop out of the sum.
    """
    buffers = GradientBuffers(np.zeros(grid.num_vertices),
                              np.zeros((grid.num_vertices, 3)))
    positions = np.ascontiguousarray(field.deformed_positions(grid))
    loss = kernels.get_backend().normal_consistency_kernel(
        positions, field.sdf, grid.tets, grid.edges, EPS_NORMAL,
        buffers.d_sdf, buffers.d_deform)
    return float(loss), buffers


def map_mse_loss(rendered: RenderMaps, target: RenderMaps, weights: dict):
    """Weighted per-map mean squared errors and the exact gradient images.

    Each map normalizes by its pixel count; the weighted gradients come back as
    a RenderMaps of dL/d(map) suitable for render_backward.
    """
    if rendered.opacity.shape != target.opacity.shape:
        raise ValueError("rendered/target map shapes differ")
    npix = rendered.opacity.size
    components = {}
    grads = RenderMaps.zeros(*rendered.opacity.shape,
                             with_color=rendered.color is not None)
    total = 0.0
    pairs = [("normal", rendered.normal, target.normal),
             ("depth", rendered.depth, target.depth),
             ("opacity", rendered.opacity, target.opacity)]
    if rendered.color is not None and target.color is not None:
        pairs.append(("color", rendered.color, target.color))
    for name, r, t in pairs:
        diff = r - t
        mse = float(np.sum(diff * diff) / npix)
        components[f"mse_{name}"] = mse
        w = float(weights.get(name, 1.0))
        total += w * mse
        grad = (2.0 / npix) * w * diff
        setattr(grads, name, grad)
    return total, components, grads
