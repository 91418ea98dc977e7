"""Flat binary tensor archive with a JSON manifest.

Layout: ``<prefix>.json`` lists name/shape/dtype/offset per tensor,
``<prefix>.bin`` holds the raw little-endian data back to back. The format
is deliberately trivial so a non-Python implementation can load identical
weights.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_NAME = "advqa-tensors-v1"


def save_tensors(prefix, tensors: Mapping[str, np.ndarray]) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    manifest = {"format": FORMAT_NAME, "byte_order": "little", "tensors": entries}
    prefix.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    prefix.with_suffix(".bin").write_bytes(b"".join(blobs))


def load_tensors(prefix) -> dict[str, np.ndarray]:
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"unsupported tensor archive format: {manifest.get('format')!r}")
    raw = prefix.with_suffix(".bin").read_bytes()
    out: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(raw[start : start + nbytes], dtype=dtype)
        out[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return out
