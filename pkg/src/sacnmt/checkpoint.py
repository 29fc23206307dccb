"""Parameter checkpoints: one ``.npz`` file of named row-major arrays plus a version tag."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_VERSION_KEY = "__format_version__"
_META_KEY = "__meta__"


def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {name: np.ascontiguousarray(a) for name, a in arrays.items()}
    for reserved in (_VERSION_KEY, _META_KEY):
        if reserved in payload:
            raise ValueError(f"array name {reserved!r} is reserved")
    payload[_VERSION_KEY] = np.array(FORMAT_VERSION)
    payload[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if _VERSION_KEY not in data.files:
            raise ValueError(f"{path}: missing checkpoint version field")
        version = int(data[_VERSION_KEY])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(str(data[_META_KEY]))
        arrays = {k: data[k].copy() for k in data.files if k not in (_VERSION_KEY, _META_KEY)}
    return arrays, meta
