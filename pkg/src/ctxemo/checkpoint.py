"""Parameter archive: tensor paths -> little-endian float32 arrays, plus a JSON header.

The archive is an uncompressed ``.npz``; every array is stored as ``<f4``
(``.npy`` members carry their own shape), and the metadata is a UTF-8 JSON
document under the reserved key ``__meta__``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

META_KEY = "__meta__"


def save_archive(path, tensors: dict, meta: dict | None = None) -> None:
    arrays = {}
    for name, arr in tensors.items():
        if name == META_KEY:
            raise ValueError(f"{META_KEY} is reserved")
        arrays[name] = np.ascontiguousarray(arr, dtype="<f4")
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    arrays[META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)


def load_archive(path) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data[META_KEY]).decode("utf-8"))
        tensors = {k: data[k].astype(np.float32, copy=False) for k in data.files if k != META_KEY}
    return tensors, meta
