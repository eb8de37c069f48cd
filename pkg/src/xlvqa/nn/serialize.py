"""Flat binary tensor container.

Layout: 4-byte magic, uint32 format version, uint64 header length, a UTF-8
JSON header (entry table with name/dtype/shape/byte offset, plus free-form
metadata), then the little-endian payload. Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"XTC1"
VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if arr.dtype == dt:
            return tag
    raise TypeError(f"unsupported dtype {arr.dtype}; use float64, float32 or int64")


def save_tensors(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        tag = _dtype_tag(arr)
        raw = arr.astype(_DTYPES[tag], copy=False).tobytes()
        entries.append({"name": name, "dtype": tag, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "meta": meta or {}, "entries": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array([VERSION], dtype="<u4").tobytes())
        fh.write(np.array([len(header)], dtype="<u8").tobytes())
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a tensor container")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        header_len = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["entries"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return arrays, header["meta"]
