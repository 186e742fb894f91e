"""Image output: PFM float maps plus 8-bit PNG previews of the same data.

PNG mappings (documented so the previews are reproducible):
  normal  -> (n + 1) / 2 per channel
  depth   -> (depth - near) / (far - near), clipped to [0, 1]
  opacity -> stored directly
  color   -> stored directly, clipped to [0, 1]
The PNG is always quantized from the float32 values that go into the PFM, so
the two files agree up to 8-bit rounding.
"""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_pfm(path, data: np.ndarray):
    """Write a 1- or 3-channel float32 PFM (little-endian, scale -1.0)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: header {kind!r}")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(4 * w * h * channels), dtype=dtype)
    data = data.reshape((h, w, 3) if channels == 3 else (h, w))
    return data[::-1].astype(np.float64)


def _to_png_u8(data: np.ndarray) -> np.ndarray:
    # quantize the exact float32 values that the PFM stores
    f32 = np.asarray(data, dtype=np.float32)
    return (np.clip(f32, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def write_png(path, data: np.ndarray):
    Image.fromarray(_to_png_u8(data)).save(path)


def normal_to_unit(normal: np.ndarray) -> np.ndarray:
    return (normal + 1.0) / 2.0


def depth_to_unit(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    return np.clip((depth - near) / (far - near), 0.0, 1.0)


def save_maps(out_dir, name, maps, camera):
    """Write <name>_{normal,depth,opacity[,color]}.{pfm,png} into out_dir."""
    import os

    written = []
    items = [("normal", maps.normal, normal_to_unit(maps.normal)),
             ("depth", maps.depth, depth_to_unit(maps.depth, camera.near, camera.far)),
             ("opacity", maps.opacity, maps.opacity)]
    if maps.color is not None:
        items.append(("color", maps.color, maps.color))
    for label, raw, preview in items:
        pfm = os.path.join(out_dir, f"{name}_{label}.pfm")
        png = os.path.join(out_dir, f"{name}_{label}.png")
        write_pfm(pfm, raw)
        write_png(png, preview)
        written.extend([pfm, png])
    return written
