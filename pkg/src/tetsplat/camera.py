"""Pinhole camera: projection, frustum culling, orbit pose sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

_GOLDEN = 0.6180339887498949  # frac(golden ratio), drives the elevation sequence


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with fx = fy and the principal point at the image center.

    ``rotation`` (3, 3) and ``translation`` (3,) map world to camera space,
    p_cam = R p_world + t, with x right, y down, z forward.
    """

    width: int
    height: int
    fy: float
    rotation: np.ndarray
    translation: np.ndarray
    near: float
    far: float
    pose: dict | None = None  # orbit parameters when built from one, for JSON round-trips

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        RtR = self.rotation @ self.rotation.T
        if not np.allclose(RtR, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")

    @property
    def fx(self) -> float:
        return self.fy

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray):
        """Project world points: returns (pixels (N,2), depths (N,), behind_near (N,))."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        behind = z <= self.near
        zsafe = np.where(z > 1e-12, z, 1e-12)
        pix = np.stack([self.fx * pc[:, 0] / zsafe + self.cx,
                        self.fy * pc[:, 1] / zsafe + self.cy], axis=1)
        return pix, z, behind

    def pixel_rays(self):
        """World-space unit ray directions through every pixel center, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
        d_world = d_cam @ self.rotation
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def unproject(self, pixel, depth):
        """Inverse of project_points for a single pixel + camera-space depth."""
        x = (pixel[0] - self.cx) / self.fx * depth
        y = (pixel[1] - self.cy) / self.fy * depth
        return self.rotation.T @ (np.array([x, y, depth]) - self.translation)


def project(camera: Camera, point):
    """Single-point projection: (pixel (2,), depth, behind_near flag)."""
    pix, z, behind = camera.project_points(np.asarray(point, dtype=np.float64)[None])
    return pix[0], float(z[0]), bool(behind[0])


def cull_tet(camera: Camera, proj: np.ndarray, depths: np.ndarray) -> bool:
    """True when the tet can be skipped. Conservative for fully-visible tets; tets
    with any vertex at or behind the near plane are culled rather than clipped."""
    depths = np.asarray(depths)
    if depths.min() <= camera.near or depths.min() > camera.far:
        return True
    proj = np.asarray(proj)
    if proj[:, 0].max() < 0 or proj[:, 0].min() > camera.width:
        return True
    if proj[:, 1].max() < 0 or proj[:, 1].min() > camera.height:
        return True
    return False


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera rotation/translation for a camera at `position` looking at `target`."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(forward, up)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return R, -R @ position


def orbit_camera(index: int, count: int, radius: float = 3.0,
                 elevation_range=(-30.0, 30.0), fov_deg: float = 40.0,
                 width: int = 256, height: int = 256,
                 near: float = 0.1, far: float = 10.0) -> Camera:
    """Deterministic orbit pose: azimuth 2*pi*index/count, elevation from a
    golden-ratio low-discrepancy sequence inside `elevation_range` (degrees)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    azimuth = 2 * math.pi * (index % count) / count
    lo, hi = elevation_range
    elev = math.radians(lo + ((index * _GOLDEN) % 1.0) * (hi - lo))
    pos = radius * np.array([math.cos(elev) * math.cos(azimuth),
                             math.cos(elev) * math.sin(azimuth),
                             math.sin(elev)])
    R, t = look_at(pos)
    fy = 0.5 * height / math.tan(math.radians(fov_deg) / 2)
    pose = {"width": width, "height": height, "fov_deg": fov_deg, "radius": radius,
            "azimuth_deg": math.degrees(azimuth), "elevation_deg": math.degrees(elev),
            "near": near, "far": far}
    return Camera(width, height, fy, R, t, near, far, pose=pose)


def camera_from_json(data) -> Camera:
    """Build a camera from the orbit-pose JSON schema."""
    if isinstance(data, str):
        data = json.loads(data)
    keys = {"width", "height", "fov_deg", "radius", "azimuth_deg",
            "elevation_deg", "near", "far"}
    unknown = set(data) - keys
    if unknown:
        raise ValueError(f"unknown camera keys: {sorted(unknown)}")
    missing = keys - set(data)
    if missing:
        raise ValueError(f"missing camera keys: {sorted(missing)}")
    az = math.radians(data["azimuth_deg"])
    el = math.radians(data["elevation_deg"])
    pos = data["radius"] * np.array([math.cos(el) * math.cos(az),
                                     math.cos(el) * math.sin(az),
                                     math.sin(el)])
    R, t = look_at(pos)
    fy = 0.5 * data["height"] / math.tan(math.radians(data["fov_deg"]) / 2)
    return Camera(data["width"], data["height"], fy, R, t,
                  data["near"], data["far"], pose=dict(data))


def camera_to_json(camera: Camera) -> dict:
    if camera.pose is None:
        raise ValueError("camera was not built from an orbit pose")
    return dict(camera.pose)
