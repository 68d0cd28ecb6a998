"""Flat tensor checkpoints: ``manifest.json`` + ``weights.bin`` (+ ``meta.json``).

The manifest is an ordered list of ``{"name", "shape", "offset"}`` entries,
offsets in bytes into ``weights.bin``, which holds little-endian float64
values concatenated in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_DTYPE = np.dtype("<f8")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, offset = [], 0
    with (path / "weights.bin").open("wb") as fh:
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype=_DTYPE)
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            fh.write(arr.tobytes())
            offset += arr.nbytes
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    if meta is not None:
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    blob = (path / "weights.bin").read_bytes()
    tensors = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=entry["offset"])
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    meta_file = path / "meta.json"
    meta = json.loads(meta_file.read_text()) if meta_file.exists() else {}
    return tensors, meta
