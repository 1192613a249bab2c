"""Dataset directory layout and manifest I/O.

Layout:
    manifest.json            camera poses, intrinsics, file names, bounds
    images/0000.png          8-bit preview of each view
    radiance/0000.pfm        float32 radiance (training input when present)
    normals/0000.pfm         ground-truth glass normals (optional)
    masks/0000.png           transmissive-surface masks (optional)

Float channels round-trip bit-exactly through PFM; 8-bit channels
round-trip exactly at quantized values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ManifestParseError, MissingFile
from .image_io import read_pfm, read_png, write_pfm, write_png
from .scene import Camera

MANIFEST_VERSION = 1


@dataclass
class SceneDataset:
    """Posed views with ground-truth images and optional normals/masks."""

    cameras: List[Camera]
    images: List[np.ndarray]                 # (H, W, 3) float32 radiance
    normals: Optional[List[np.ndarray]] = None
    masks: Optional[List[np.ndarray]] = None
    bounds_lo: np.ndarray = field(default_factory=lambda: np.array([-2.0, -2.0, -2.0]))
    bounds_hi: np.ndarray = field(default_factory=lambda: np.array([2.0, 2.0, 2.0]))
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cameras)

    @property
    def resolution(self):
        return self.images[0].shape[:2]


def write_dataset(ds: SceneDataset, out_dir):
    """Persist a dataset; see the module docstring for the layout."""
    out = Path(out_dir)
    for sub in ("images", "radiance", "normals", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, img) in enumerate(zip(ds.cameras, ds.images)):
        stem = f"{i:04d}"
        write_png(out / "images" / f"{stem}.png", img)
        write_pfm(out / "radiance" / f"{stem}.pfm", img)
        view = {
            "image": f"images/{stem}.png",
            "radiance": f"radiance/{stem}.pfm",
            "world_to_camera": cam.world_to_camera.reshape(-1).tolist(),
            "intrinsics": {"fx": cam.fx, "fy": cam.fy,
                           "cx": cam.cx, "cy": cam.cy},
            "resolution": [cam.width, cam.height],
        }
        if ds.normals is not None:
            write_pfm(out / "normals" / f"{stem}.pfm", ds.normals[i])
            view["normals"] = f"normals/{stem}.pfm"
        if ds.masks is not None:
            write_png(out / "masks" / f"{stem}.png",
                      ds.masks[i].astype(np.float64))
            view["mask"] = f"masks/{stem}.png"
        views.append(view)
    manifest = {
        "version": MANIFEST_VERSION,
        "bounds_lo": ds.bounds_lo.tolist(),
        "bounds_hi": ds.bounds_hi.tolist(),
        "meta": ds.meta,
        "views": views,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def _parse_camera(view, index):
    try:
        m = np.array(view["world_to_camera"], dtype=np.float64)
        if m.size != 16:
            raise ManifestParseError(
                f"view {index}: world_to_camera needs 16 numbers, "
                f"got {m.size}")
        m = m.reshape(4, 4)
        intr = view["intrinsics"]
        w, h = view["resolution"]
        return Camera(rotation=m[:3, :3], translation=m[:3, 3],
                      fx=float(intr["fx"]), fy=float(intr["fy"]),
                      cx=float(intr["cx"]), cy=float(intr["cy"]),
                      width=int(w), height=int(h))
    except ManifestParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestParseError(f"view {index}: {exc}") from exc


def load_dataset(in_dir) -> SceneDataset:
    """Inverse of write_dataset; prefers float radiance over 8-bit PNG."""
    root = Path(in_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingFile(f"no manifest.json under {root}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{manifest_path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ManifestParseError(
            f"manifest version {manifest.get('version')} not supported")

    cameras, images = [], []
    normals: Optional[list] = None
    masks: Optional[list] = None
    for i, view in enumerate(manifest["views"]):
        cameras.append(_parse_camera(view, i))
        rad_rel = view.get("radiance")
        if rad_rel is not None:
            path = root / rad_rel
            if not path.exists():
                raise MissingFile(f"view {i}: missing radiance file {path}")
            images.append(read_pfm(path))
        else:
            path = root / view["image"]
            if not path.exists():
                raise MissingFile(f"view {i}: missing image file {path}")
            images.append(read_png(path).astype(np.float32))
        if "normals" in view:
            path = root / view["normals"]
            if not path.exists():
                raise MissingFile(f"view {i}: missing normals file {path}")
            normals = normals or []
            normals.append(read_pfm(path))
        if "mask" in view:
            path = root / view["mask"]
            if not path.exists():
                raise MissingFile(f"view {i}: missing mask file {path}")
            masks = masks or []
            masks.append(read_png(path) > 0.5)
    return SceneDataset(
        cameras=cameras, images=images, normals=normals, masks=masks,
        bounds_lo=np.array(manifest["bounds_lo"], dtype=np.float64),
        bounds_hi=np.array(manifest["bounds_hi"], dtype=np.float64),
        meta=manifest.get("meta", {}))
