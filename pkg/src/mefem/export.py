"""Atomic file outputs: matrix CSV and 8-bit binary PGM."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def matrix_to_csv(matrix: np.ndarray) -> str:
    matrix = np.asarray(matrix)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {matrix.shape}")
    return "\n".join(",".join(f"{v:.10g}" for v in row) for row in matrix) + "\n"


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    atomic_write_text(path, matrix_to_csv(matrix))


def read_matrix_csv(path: str | Path) -> np.ndarray:
    rows = [
        [float(v) for v in line.split(",")]
        for line in Path(path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return np.asarray(rows, dtype=np.float64)


def write_matrix_pgm(path: str | Path, matrix: np.ndarray) -> None:
    """Binary (P5) PGM; values in [0, 1] map to rounded [0, 255] grey levels."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {matrix.shape}")
    if matrix.min() < 0.0 or matrix.max() > 1.0:
        raise ValueError("PGM export expects values in [0, 1]")
    grey = np.rint(matrix * 255.0).astype(np.uint8)
    header = f"P5\n{matrix.shape[1]} {matrix.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + grey.tobytes())


def read_matrix_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    parts = blob.split(b"\n", 3)
    width, height = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    data = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return data.reshape(height, width).astype(np.float64) / maxval
