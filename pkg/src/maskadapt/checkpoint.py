"""Versioned ``.npz`` containers of named, shape-tagged arrays plus JSON metadata."""
from __future__ import annotations

import json
import os
from typing import Mapping, Optional

import numpy as np

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be read or does not match expectations."""


def save_arrays(path: str, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    header = {
        "version": FORMAT_VERSION,
        "shapes": {k: list(np.shape(v)) for k, v in arrays.items()},
        "dtypes": {k: str(np.asarray(v).dtype) for k, v in arrays.items()},
        "meta": meta or {},
    }
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[_META_KEY] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_arrays(path: str, expected_shapes: Optional[Mapping[str, tuple]] = None) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``; shapes are validated against the header and ``expected_shapes``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            files = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except Exception as exc:  # zipfile / format errors
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if _META_KEY not in files:
        raise CheckpointError(f"{path}: missing checkpoint header")
    header = json.loads(files.pop(_META_KEY).tobytes().decode())
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    problems = []
    for name, shape in header["shapes"].items():
        if name not in files:
            problems.append(f"missing array {name}")
        elif list(files[name].shape) != shape:
            problems.append(f"{name}: stored shape {files[name].shape} != header {tuple(shape)}")
    for name, shape in (expected_shapes or {}).items():
        if name not in files:
            problems.append(f"missing array {name}")
        elif tuple(files[name].shape) != tuple(shape):
            problems.append(f"{name}: shape {files[name].shape} != expected {tuple(shape)}")
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    return files, header["meta"]
