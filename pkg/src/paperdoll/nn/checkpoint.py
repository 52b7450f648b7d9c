"""Checkpoint container: JSON header + flat little-endian arrays.

Layout: magic ``PDCK``, u32 format version, u64 header length, UTF-8 JSON
header, then each array's raw bytes in header order. Arrays are stored
little-endian in their native dtype, so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PDCK"
VERSION = 1


def save(path, arrays, meta=None):
    """Write named arrays (dict or list of (name, ndarray)) plus a meta dict."""
    if isinstance(arrays, dict):
        items = list(arrays.items())
    else:
        items = list(arrays)
    entries = []
    blobs = []
    for name, arr in items:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": le.dtype.str}
        )
        blobs.append(le.tobytes())
    header = json.dumps(
        {"version": VERSION, "entries": entries, "meta": meta or {}}
    ).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load(path):
    """Read a checkpoint; returns (dict name -> ndarray, meta dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["entries"]:
            dtype = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = fh.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="))
        return arrays, header.get("meta", {})
