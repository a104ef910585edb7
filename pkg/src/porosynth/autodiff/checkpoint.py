"""Checkpoints: JSON manifest plus one little-endian float32 blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DataError


def save_checkpoint(directory, params, manifest=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / "params.bin", "wb") as fh:
        for name, arr in params.items():
            a = np.asarray(getattr(arr, "data", arr), dtype="<f4")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    doc = dict(manifest or {})
    doc.update({"dtype": "float32", "endianness": "little", "blob": "params.bin", "params": entries})
    (directory / "manifest.json").write_text(json.dumps(doc, indent=2))
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    mp = directory / "manifest.json"
    if not mp.exists():
        raise DataError(f"checkpoint manifest not found: {mp}")
    doc = json.loads(mp.read_text())
    blob = np.frombuffer((directory / doc["blob"]).read_bytes(), dtype="<f4")
    params = {}
    for e in doc["params"]:
        n = int(np.prod(e["shape"]))
        params[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float32)
    return params, doc
