"""Checkpoint directory format: manifest.json plus one raw weights blob.

The manifest carries a format version, the model kind and config, and a
tensor index sorted by name with byte offsets into weights.bin. Weights are
stored as little-endian float32 with no padding, concatenated in index
order, so a round trip is bit-exact and the blob is mmap-friendly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = arrays[name]
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} must be float32, got {arr.dtype}")
        index.append({
            "name": name,
            "dtype": "f32",
            "shape": list(arr.shape),
            "byte_offset": offset,
        })
        offset += arr.nbytes
    manifest = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "tensors": index,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(path / "weights.bin", "wb") as fh:
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[str, dict, dict[str, np.ndarray]]:
    path = Path(path)
    man_path = path / "manifest.json"
    if not man_path.exists():
        raise CheckpointError(f"no manifest.json under {path}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = (path / "weights.bin").read_bytes()
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r} for {entry['name']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(blob):
            raise CheckpointError(f"weights.bin truncated at tensor {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        arrays[entry["name"]] = np.ascontiguousarray(arr)
    return manifest["kind"], manifest["config"], arrays
