"""8-bit PNG and 32-bit float PFM image I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestParseError


def write_png(path, img):
    """Write an image in [0, 1] (H, W) or (H, W, 3) as 8-bit PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(str(path))


def read_png(path):
    """Read an 8-bit PNG back to float64 in [0, 1]."""
    with Image.open(str(path)) as im:
        arr = np.asarray(im)
    return arr.astype(np.float64) / 255.0


def write_pfm(path, img):
    """Write (H, W) or (H, W, 3) float data as little-endian PFM.

    PFM stores rows bottom-to-top; values are float32.
    """
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf\n"
        flipped = arr[::-1]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF\n"
        flipped = arr[::-1]
    else:
        raise ValueError(f"PFM supports 1 or 3 channels, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(flipped, dtype="<f4").tobytes())


def read_pfm(path):
    """Read a PFM file written by write_pfm; returns float32."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ManifestParseError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ManifestParseError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h * (3 if magic == b"PF" else 1)
        endian = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(count * 4), dtype=endian).astype(np.float32)
    if magic == b"PF":
        data = data.reshape(h, w, 3)
    else:
        data = data.reshape(h, w)
    return data[::-1].copy()


def export_buffers(buffers, out_dir, stem):
    """Dump rendered frame buffers: color as PNG, float maps as PFM."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / f"{stem}_color.png", buffers.color)
    write_pfm(out / f"{stem}_depth.pfm", buffers.depth)
    write_pfm(out / f"{stem}_normal.pfm", buffers.normal)
    write_pfm(out / f"{stem}_position.pfm", buffers.position)
    write_pfm(out / f"{stem}_reflectivity.pfm", buffers.reflectivity)
