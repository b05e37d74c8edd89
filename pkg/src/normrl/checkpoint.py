"""Checkpoint directory format: raw little-endian arrays plus a JSON manifest.

A checkpoint is a directory holding `arrays.bin` (all tensors concatenated)
and `manifest.json` with one entry per tensor: name, shape, dtype, byte
offset. An optional free-form `meta` dict rides along in the manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError

_DATA_FILE = "arrays.bin"
_MANIFEST = "manifest.json"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / _DATA_FILE, "wb") as fh:
        for name, arr in arrays.items():
            kind = str(arr.dtype)
            if kind not in _DTYPES:
                raise ConfigError(f"checkpoint tensors must be float32/float64, {name} is {kind}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
            entries.append(
                {"name": name, "shape": list(arr.shape), "dtype": kind, "offset": offset, "nbytes": len(raw)}
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {"format": "tensor-dir-v1", "data": _DATA_FILE, "tensors": entries, "meta": meta or {}}
    with open(path / _MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        with open(path / _MANIFEST, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"no checkpoint manifest under {path}") from exc
    blob = (path / manifest["data"]).read_bytes()
    arrays = {}
    for ent in manifest["tensors"]:
        dt = np.dtype(_DTYPES[ent["dtype"]])
        raw = blob[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=dt).reshape(ent["shape"]).astype(ent["dtype"])
    return arrays, manifest.get("meta", {})
