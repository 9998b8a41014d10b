"""Bit-exact tensor persistence.

A checkpoint is a JSON manifest plus one raw binary blob. The manifest lists
every tensor by name with its shape, dtype tag and byte offset into the blob;
the blob concatenates the tensors' little-endian float64 bytes in manifest
order. Loading reproduces the arrays bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

FORMAT_TAG = "tensor-checkpoint-v1"
_DTYPE_TAG = "f64"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed manifest, missing blob, or inconsistent sizes."""


def save_tensors(manifest_path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write `tensors` to `manifest_path` (JSON) plus a sibling .bin blob."""
    manifest_path = Path(manifest_path)
    if not tensors:
        raise CheckpointError("refusing to write an empty checkpoint")
    blob_path = manifest_path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=_DTYPE)
        raw = arr.tobytes(order="C")
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": _DTYPE_TAG,
            "offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT_TAG,
        "blob": blob_path.name,
        "total_bytes": offset,
        "tensors": entries,
    }
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_tensors(manifest_path) -> Dict[str, np.ndarray]:
    """Read a checkpoint back; arrays match the saved ones bit for bit."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT_TAG:
        raise CheckpointError(f"unknown checkpoint format tag {manifest.get('format')!r}")
    blob_path = manifest_path.parent / manifest["blob"]
    try:
        raw = blob_path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob {blob_path}: {exc}") from exc
    if len(raw) != manifest.get("total_bytes"):
        raise CheckpointError(
            f"blob has {len(raw)} bytes, manifest expects {manifest.get('total_bytes')}"
        )
    out: Dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        if entry.get("dtype") != _DTYPE_TAG:
            raise CheckpointError(f"tensor {entry.get('name')!r} has unsupported dtype")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * _DTYPE.itemsize
        if end > len(raw):
            raise CheckpointError(f"tensor {entry['name']!r} overruns the blob")
        arr = np.frombuffer(raw[start:end], dtype=_DTYPE).reshape(shape).copy()
        out[entry["name"]] = arr
    return out
