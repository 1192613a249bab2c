"""Single-file checkpointing with a version tag and bit-exact round-trips.

A checkpoint is an .npz holding every parameter array (both Gaussian
sets, reflection attributes, environment texels, light-field weights),
optimizer state, and a JSON metadata blob (configs, counters, RNG state).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointVersionMismatch, MissingFile

CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict):
    """Write arrays plus a JSON meta blob; keys must be str."""
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__version__"] = np.array(CHECKPOINT_VERSION)
    payload["__meta__"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path):
    """Read back (arrays, meta); raises on missing file or format drift."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionMismatch(
                f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        meta = json.loads(bytes(data["__meta__"].tobytes()).decode("utf-8"))
        arrays = {k: data[k] for k in data.files
                  if k not in ("__version__", "__meta__")}
    return arrays, meta
