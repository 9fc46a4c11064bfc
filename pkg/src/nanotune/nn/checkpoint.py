"""Checkpoint container.

A checkpoint is a directory with three files:

``arch.json``
    The architecture descriptor as structured JSON.
``params.bin``
    All tensors as little-endian float32, concatenated in manifest order.
``manifest.json``
    One entry per tensor: layer index, role, shape, byte offset.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .arch import ArchDescriptor
from .engine import ModelParams

_LE_F32 = np.dtype("<f4")


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "arch.json").write_text(params.arch.to_json() + "\n", encoding="utf-8")
    entries = []
    offset = 0
    with open(path / "params.bin", "wb") as fh:
        for (layer, role) in sorted(params.keys()):
            data = np.ascontiguousarray(params[(layer, role)], dtype=_LE_F32)
            fh.write(data.tobytes())
            entries.append(
                {"layer": layer, "role": role, "shape": list(data.shape), "offset": offset}
            )
            offset += data.nbytes
    manifest = {"dtype": "float32-le", "total_bytes": offset, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    arch = ArchDescriptor.from_json((path / "arch.json").read_text(encoding="utf-8"))
    manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    blob = (path / "params.bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError(f"params.bin holds {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=_LE_F32, count=n, offset=e["offset"])
        tensors[(e["layer"], e["role"])] = arr.astype(np.float32).reshape(e["shape"])
    return ModelParams(arch, tensors)


def checkpoint_extra(path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    return manifest.get("extra", {})
