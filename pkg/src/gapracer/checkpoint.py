"""Parameter checkpoint file: flat name -> (shape, row-major float64 values).

Layout (JSON, one object per file), stable across versions:

    {
      "schema": "gapracer-checkpoint-v1",
      "seed": 0,
      "step": 2000,
      "header": { ...arbitrary model/run metadata, validated by the loader... },
      "params": { "<name>": {"shape": [m, n], "data": [..row-major floats..]} }
    }

Floats are serialized with shortest round-trip repr, so save/load is
bit-exact for finite doubles.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DataError

SCHEMA = "gapracer-checkpoint-v1"


def save_checkpoint(path, params: dict, seed: int, step: int, header: dict | None = None) -> None:
    """Write parameters (Nodes or arrays) plus provenance to ``path``."""
    blob = {"schema": SCHEMA, "seed": int(seed), "step": int(step), "header": header or {}}
    out = {}
    for name, p in params.items():
        value = p.value if hasattr(p, "value") else np.asarray(p, dtype=np.float64)
        out[name] = {"shape": list(value.shape), "data": value.ravel().tolist()}
    blob["params"] = out
    Path(path).write_text(json.dumps(blob, indent=1), encoding="utf-8")


def load_checkpoint(path) -> dict:
    """Read a checkpoint; returns dict with 'params' as float64 arrays."""
    try:
        blob = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if blob.get("schema") != SCHEMA:
        raise DataError(f"unknown checkpoint schema {blob.get('schema')!r} in {path}")
    params = {}
    for name, entry in blob["params"].items():
        shape = tuple(entry["shape"])
        data = np.asarray(entry["data"], dtype=np.float64)
        expected = int(np.prod(shape)) if shape else 1
        if data.size != expected:
            raise DataError(f"checkpoint parameter {name!r}: {data.size} values "
                            f"do not fill shape {shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"checkpoint parameter {name!r} contains non-finite values")
        params[name] = data.reshape(shape)
    blob["params"] = params
    return blob
