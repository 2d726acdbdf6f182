"""Checkpoint directories.

Layout::

    <dir>/manifest.json        # shapes, dtypes, seeds, config + its hash, free metadata
    <dir>/<tensor path>        # raw little-endian float32, row-major

Tensors are held in float64 in memory and rounded to float32 on disk.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
FORMAT = "keymem-ckpt-1"


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save(path, tensors: dict[str, np.ndarray], config: dict, seeds: dict | None = None,
         meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        if "/" in name or name == MANIFEST or name.startswith("."):
            raise CheckpointError(f"illegal tensor path {name!r}")
        arr = np.asarray(tensors[name], dtype="<f4", order="C")  # keeps 0-d shapes
        arr.tofile(path / name)
        entries[name] = {"shape": list(arr.shape), "dtype": "float32-le"}
    manifest = {
        "format": FORMAT,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds or {},
        "meta": meta or {},
        "tensors": entries,
    }
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    os.replace(tmp, path / MANIFEST)
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if manifest["config_hash"] != config_hash(manifest["config"]):
        raise CheckpointError(f"{path}: config hash does not match stored config")
    return manifest


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = load_manifest(path)
    tensors = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        raw = np.fromfile(path / name, dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise CheckpointError(f"{path / name}: expected {shape}, found {raw.size} values")
        tensors[name] = raw.reshape(shape).astype(np.float64)
    return tensors, manifest


def round_f32(x: np.ndarray) -> np.ndarray:
    """The value a tensor will have after a save/load round trip."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)
