"""Versioned binary checkpoint container.

Byte layout (all integers little-endian):

    offset  size  field
    0       4     magic, the ASCII bytes "MEFE"
    4       4     format version, u32 (currently 1)
    8       8     header length H, u64
    16      H     header, UTF-8 JSON
    16+H    ...   array payload, raw C-order little-endian bytes

The JSON header has two keys: ``meta`` (free-form JSON: config, rng state,
step counters) and ``arrays``, a list of ``{name, dtype, shape, offset,
nbytes}`` records whose offsets are relative to the start of the payload.
Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"MEFE"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    if not arr.flags.c_contiguous:  # ascontiguousarray would flatten 0-d arrays
        arr = np.ascontiguousarray(arr)
    return arr


def write_checkpoint(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    meta: Mapping[str, Any],
) -> None:
    path = Path(path)
    records = []
    payload = bytearray()
    for name, arr in arrays.items():
        arr = _little_endian(np.asarray(arr))
        raw = arr.tobytes()
        records.append(
            {
                "name": name,
                "dtype": np.dtype(arr.dtype).name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps({"meta": dict(meta), "arrays": records}).encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    header_end = 16 + header_len
    header = json.loads(blob[16:header_end].decode("utf-8"))
    payload = blob[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for rec in header["arrays"]:
        dtype = np.dtype(rec["dtype"]).newbyteorder("<")
        raw = payload[rec["offset"] : rec["offset"] + rec["nbytes"]]
        if len(raw) != rec["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for array {rec['name']!r}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(rec["shape"]).copy()
        arrays[rec["name"]] = arr
    return arrays, header["meta"]
