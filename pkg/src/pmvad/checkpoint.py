"""Single-file checkpoints: magic, JSON header, little-endian tensor blob.

Layout::

    8 bytes   b"PMVADCK1"
    4 bytes   uint32 LE header length H
    H bytes   UTF-8 JSON header
    ...       tensors back to back, each little-endian, in header order

Header keys: ``format_version``, ``meta`` (free-form dict, e.g. the model
config) and ``tensors`` (list of ``name``, ``shape``, ``dtype``,
``offset``, ``nbytes``, ``trainable``); offsets are relative to the end of
the header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PMVADCK1"
FORMAT_VERSION = 1


def save(path, named_params, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, p in named_params:
        arr = np.ascontiguousarray(p.value)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset,
                        "nbytes": len(blob), "trainable": bool(p.trainable)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load(path) -> tuple[dict, dict[str, np.ndarray], dict[str, bool]]:
    """Returns ``(meta, arrays, trainable_flags)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint {path}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    base = 12 + hlen
    arrays, flags = {}, {}
    for e in header["tensors"]:
        start = base + e["offset"]
        chunk = data[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        flags[e["name"]] = bool(e["trainable"])
    return header["meta"], arrays, flags
