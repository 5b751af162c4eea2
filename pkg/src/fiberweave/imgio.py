"""Image and mesh I/O: 8-bit sRGB PNG, 32-bit linear PFM, minimal OBJ.

Rendered images are linear RGB throughout the library; sRGB encoding
happens only here, at PNG export.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    """Component-wise sRGB opto-electronic transfer, input clipped to [0,1]."""
    x = np.clip(x, 0.0, 1.0)
    lo = 12.92 * x
    hi = 1.055 * np.power(x, 1.0 / 2.4, where=x > 0,
                          out=np.zeros_like(x)) - 0.055
    return np.where(x <= 0.0031308, lo, hi)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    lo = x / 12.92
    hi = np.power((x + 0.055) / 1.055, 2.4)
    return np.where(x <= 0.04045, lo, hi)


def write_png(path, img: np.ndarray) -> None:
    """Save a linear-RGB float image as 8-bit sRGB PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    u8 = np.round(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(Path(path), format="PNG")


def read_png(path) -> np.ndarray:
    """Load an 8-bit PNG as linear RGB floats in [0, 1]."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def write_pfm(path, img: np.ndarray) -> None:
    """Save a float image as binary PFM (little-endian, bottom-up rows)."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
        data = img
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
        data = img
    else:
        raise ValueError("expected (H, W) or (H, W, 3) image")
    h, w = data.shape[:2]
    with open(Path(path), "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")          # negative scale = little endian
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(Path(path), "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError("not a PFM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * (3 if header == b"PF" else 1)
        fmt = "<" if scale < 0 else ">"
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ValueError("truncated PFM payload")
        data = np.array(struct.unpack(f"{fmt}{count}f", raw),
                        dtype=np.float32)
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).copy()


def load_obj(path):
    """Minimal Wavefront OBJ reader: v / vt / f records, triangles only.

    Returns ``(vertices (V,3), faces (F,3), uv (F,3,2))``; faces must carry
    texture indices (``f v/vt ...``). Quads are fanned into triangles.
    """
    verts = []
    uvs = []
    faces = []
    face_uv = []
    with open(Path(path), "r", encoding="utf-8") as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                corner = []
                for token in parts[1:]:
                    bits = token.split("/")
                    vi = int(bits[0])
                    if len(bits) < 2 or not bits[1]:
                        raise ValueError(
                            "OBJ faces must reference texture coordinates")
                    ti = int(bits[1])
                    vi = vi - 1 if vi > 0 else len(verts) + vi
                    ti = ti - 1 if ti > 0 else len(uvs) + ti
                    corner.append((vi, ti))
                for k in range(1, len(corner) - 1):
                    tri = (corner[0], corner[k], corner[k + 1])
                    faces.append([c[0] for c in tri])
                    face_uv.append([c[1] for c in tri])
    if not faces:
        raise ValueError("OBJ file contains no faces")
    v = np.asarray(verts, dtype=np.float64)
    uv = np.asarray(uvs, dtype=np.float64)
    f_idx = np.asarray(faces, dtype=np.int64)
    fu = uv[np.asarray(face_uv, dtype=np.int64)]
    return v, f_idx, fu
