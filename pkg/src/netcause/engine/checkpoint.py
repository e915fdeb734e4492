"""Parameter checkpoints as JSON.

Layout::

    {"format": "netcause-checkpoint/1",
     "params": [{"name": str, "shape": [int, ...], "values": [float, ...]}, ...]}

``values`` is the row-major flattening; Python's float repr round-trips
float64 exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "netcause-checkpoint/1"


def save_checkpoint(params: dict, path) -> None:
    records = [{"name": name, "shape": list(np.shape(p.value)),
                "values": np.asarray(p.value).ravel().tolist()}
               for name, p in sorted(params.items())]
    Path(path).write_text(json.dumps({"format": FORMAT, "params": records}), encoding="utf-8")


def load_checkpoint(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FORMAT:
        raise ValueError(f"unknown checkpoint format {doc.get('format')!r}")
    return {r["name"]: np.asarray(r["values"], dtype=np.float64).reshape(r["shape"])
            for r in doc["params"]}


def restore(params: dict, arrays: dict) -> None:
    """Copy loaded arrays into live parameters, checking names and shapes."""
    missing = set(params) - set(arrays)
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)}")
    for name, p in params.items():
        if arrays[name].shape != p.value.shape:
            raise ValueError(f"{name}: shape {arrays[name].shape} != {p.value.shape}")
        p.value[...] = arrays[name]
