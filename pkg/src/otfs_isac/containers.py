"""Versioned on-disk containers for datasets and model weights.

One format for everything: an .npz archive whose arrays are the payload
plus a single JSON string under the key "__header__" carrying the schema
tag and all metadata. Arrays are stored as raw 64-bit values, so a
save/load round trip is bit-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

SCHEMA_PREFIX = "otfs-isac"
SCHEMA_VERSION = 1
_HEADER_KEY = "__header__"


def save_container(path, kind: str, meta: dict, arrays: dict) -> Path:
    """Write arrays plus a JSON header describing them."""
    path = Path(path)
    header = {
        "schema": f"{SCHEMA_PREFIX}/{kind}/v{SCHEMA_VERSION}",
        "kind": kind,
        **meta,
    }
    for name in arrays:
        if name == _HEADER_KEY:
            raise ValueError(f"array name '{name}' is reserved")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **{_HEADER_KEY: np.array(json.dumps(header))}, **arrays)
    except OSError as exc:
        raise OSError(f"cannot write container {path}: {exc}")
    return path


def load_container(path, kind: str | None = None) -> tuple[dict, dict]:
    """Read back (header, arrays); optionally enforce the container kind."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"container not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if _HEADER_KEY not in data:
            raise ValueError(f"{path} is not a container (missing header)")
        header = json.loads(str(data[_HEADER_KEY]))
        arrays = {k: data[k] for k in data.files if k != _HEADER_KEY}
    schema = header.get("schema", "")
    if not schema.startswith(f"{SCHEMA_PREFIX}/"):
        raise ValueError(f"{path}: unknown schema '{schema}'")
    if kind is not None and header.get("kind") != kind:
        raise ValueError(f"{path}: expected a '{kind}' container, found '{header.get('kind')}'")
    return header, arrays


def save_weights(path, meta: dict, params: dict) -> Path:
    """Model weights: flat name -> float64 array mapping."""
    arrays = {f"w::{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    return save_container(path, "weights", meta, arrays)


def load_weights(path) -> tuple[dict, dict]:
    header, arrays = load_container(path, kind="weights")
    params = {k[3:]: v for k, v in arrays.items() if k.startswith("w::")}
    return header, params
