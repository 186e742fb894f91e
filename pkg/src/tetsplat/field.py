"""Optimizable field state (per-vertex SDF + deformation) and per-tet gradients."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

EPS_VOLUME = 1e-12   # degenerate-tet threshold on |signed volume|
EPS_NORMAL = 1e-8    # below this gradient norm a tet has no normal
DEFORM_FRACTION = 0.45  # deformation clamp as a fraction of the cell edge

_MAGIC = b"TSPF"
_VERSION = 1


class DegenerateTetError(ValueError):
    """Raised when a tetrahedron is too close to flat for a gradient solve."""


@dataclass
class FieldState:
    """Per-vertex SDF values and deformations plus the opacity steepness s.

    ``deformation`` components are clamped to +/- ``deform_limit`` at all times;
    the limit is chosen so no grid tet can invert.
    """

    sdf: np.ndarray
    deformation: np.ndarray
    deform_limit: float
    steepness: float | None = None

    def __post_init__(self):
        self.sdf = np.asarray(self.sdf, dtype=np.float64)
        self.deformation = np.asarray(self.deformation, dtype=np.float64)
        self.clamp_deformation()

    def clamp_deformation(self):
        np.clip(self.deformation, -self.deform_limit, self.deform_limit,
                out=self.deformation)

    def deformed_positions(self, grid) -> np.ndarray:
        return grid.rest_positions + self.deformation

    def copy(self) -> "FieldState":
        return FieldState(self.sdf.copy(), self.deformation.copy(),
                          self.deform_limit, self.steepness)


def deform_limit_for(grid) -> float:
    return DEFORM_FRACTION * grid.cell_edge


def init_sphere(grid, radius: float) -> FieldState:
    """Sphere-initialized field: f = ||rest position|| - radius, zero deformation."""
    if not 0.0 < radius < 1.0:
        raise ValueError(f"sphere radius must be in (0, 1), got {radius}")
    sdf = np.linalg.norm(grid.rest_positions, axis=1) - radius
    return FieldState(sdf, np.zeros_like(grid.rest_positions), deform_limit_for(grid))


def init_from_shape(grid, shape) -> FieldState:
    """Field sampled from an analytic shape's exact SDF at the rest positions."""
    sdf = analytic_sdf(shape, grid.rest_positions)
    return FieldState(sdf, np.zeros_like(grid.rest_positions), deform_limit_for(grid))


@dataclass(frozen=True)
class AnalyticShape:
    """Analytic SDF target: sphere (radius), torus (major, minor, z axis) or box
    (half extents), optionally offset by ``center``."""

    kind: str
    params: tuple
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("sphere", "torus", "box"):
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if any(p <= 0 for p in self.params):
            raise ValueError("shape parameters must be positive")


def analytic_sdf(shape: AnalyticShape, points: np.ndarray) -> np.ndarray:
    """Exact signed distance of `points` ((..., 3)) to the shape."""
    p = np.asarray(points, dtype=np.float64) - np.asarray(shape.center)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if shape.kind == "sphere":
        (r,) = shape.params
        d = np.linalg.norm(p, axis=-1) - r
    elif shape.kind == "torus":
        major, minor = shape.params
        ring = np.hypot(np.hypot(p[..., 0], p[..., 1]) - major, p[..., 2])
        d = ring - minor
    else:
        half = np.asarray(shape.params)
        q = np.abs(p) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        d = outside + inside
    return d[0] if single else d


def sample_shape_surface(shape: AnalyticShape, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples on the analytic surface (rejection-weighted where needed)."""
    center = np.asarray(shape.center)
    if shape.kind == "sphere":
        (r,) = shape.params
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return center + r * v
    if shape.kind == "torus":
        major, minor = shape.params
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            u = rng.uniform(0, 2 * np.pi, m)
            t = rng.uniform(0, 2 * np.pi, m)
            accept = rng.random(m) < (major + minor * np.cos(t)) / (major + minor)
            u, t = u[accept], t[accept]
            ring = major + minor * np.cos(t)
            pts = np.stack([ring * np.cos(u), ring * np.sin(u), minor * np.sin(t)], axis=1)
            out = np.concatenate([out, pts])
        return center + out[:n]
    half = np.asarray(shape.params)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 4
    probs = np.repeat(areas, 2)
    probs = probs / probs.sum()
    face = rng.choice(6, size=n, p=probs)
    pts = rng.uniform(-1, 1, size=(n, 3)) * half
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return center + pts


def tet_sdf_gradients(positions: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Constant in-tet field gradients for a batch of tets.

    positions: (K, 4, 3) vertex positions, f: (K, 4) field samples. Solves the
    4x4 system [v_i^T 1] x = f_i per tet; the gradient is the first three
    components of x.
    """
    K = len(positions)
    B = np.concatenate([positions, np.ones((K, 4, 1))], axis=2)
    x = np.linalg.solve(B, f[..., None])[..., 0]
    return x[:, :3]


def tet_sdf_gradient(positions: np.ndarray, f: np.ndarray) -> np.ndarray:
    """Gradient of the linear field matching four samples on one tetrahedron."""
    positions = np.asarray(positions, dtype=np.float64)
    a = positions[0]
    vol = np.dot(np.cross(positions[1] - a, positions[2] - a), positions[3] - a) / 6.0
    if abs(vol) <= EPS_VOLUME:
        raise DegenerateTetError(f"tet signed volume {vol:.3e} below threshold")
    return tet_sdf_gradients(positions[None], np.asarray(f, dtype=np.float64)[None])[0]


def tet_normal(g: np.ndarray) -> np.ndarray | None:
    """Unit normal from an in-tet gradient; None when the gradient vanishes."""
    norm = np.linalg.norm(g)
    if norm < EPS_NORMAL:
        return None
    return np.asarray(g, dtype=np.float64) / norm


def tet_normals(gradients: np.ndarray):
    """Batched tet_normal: returns (normals, defined_mask); undefined rows are zero."""
    norms = np.linalg.norm(gradients, axis=1)
    defined = norms >= EPS_NORMAL
    out = np.zeros_like(gradients)
    out[defined] = gradients[defined] / norms[defined, None]
    return out, defined


def save_checkpoint(state: FieldState, path) -> None:
    """Little-endian binary checkpoint: magic, version, count, f, deformation, s."""
    n = len(state.sdf)
    s = state.steepness if state.steepness is not None else float("nan")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, n))
        fh.write(state.sdf.astype("<f8").tobytes())
        fh.write(state.deformation.astype("<f8").tobytes())
        fh.write(struct.pack("<d", s))


def load_checkpoint(path, deform_limit: float) -> FieldState:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        version, n = struct.unpack("<IQ", fh.read(12))
        if version != _VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sdf = np.frombuffer(fh.read(8 * n), dtype="<f8").copy()
        deform = np.frombuffer(fh.read(24 * n), dtype="<f8").reshape(n, 3).copy()
        (s,) = struct.unpack("<d", fh.read(8))
    return FieldState(sdf, deform, deform_limit, None if np.isnan(s) else s)
