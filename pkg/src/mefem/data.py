"""Dataset handles: directories of PNG crops plus optional attribute labels."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .masking import GridSpec
from .synthdata import read_attributes_csv


def load_image_dir(path: str | Path, grid: GridSpec | None = None) -> np.ndarray:
    """Load every PNG under ``path`` (sorted by name) as uint8 [N, S, S, 3]."""
    grid = grid if grid is not None else GridSpec()
    path = Path(path)
    files = sorted(path.glob("*.png"))
    if not files:
        raise FileNotFoundError(f"no PNG images found in {path}")
    size = grid.image_size
    images = np.empty((len(files), size, size, 3), dtype=np.uint8)
    for i, file in enumerate(files):
        arr = np.asarray(Image.open(file).convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (size, size):
            raise ValueError(f"{file}: expected {size}x{size} image, got {arr.shape[:2]}")
        images[i] = arr
    return images


def load_labeled_dir(
    path: str | Path,
    attribute: str,
    grid: GridSpec | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Load images plus one attribute column from ``attributes.csv``.

    Rows are aligned by filename, so the CSV order need not match the
    directory listing.
    """
    from .synthdata import ATTRIBUTE_NAMES

    path = Path(path)
    names, values = read_attributes_csv(path / "attributes.csv")
    if attribute not in ATTRIBUTE_NAMES:
        raise ValueError(f"unknown attribute {attribute!r}; expected one of {ATTRIBUTE_NAMES}")
    column = values[:, ATTRIBUTE_NAMES.index(attribute)]
    by_name = {name: column[i] for i, name in enumerate(names)}
    grid = grid if grid is not None else GridSpec()
    files = sorted(Path(path).glob("*.png"))
    missing = [f.name for f in files if f.name not in by_name]
    if missing:
        raise ValueError(f"images without attribute rows: {missing[:5]}")
    images = load_image_dir(path, grid)
    labels = np.asarray([by_name[f.name] for f in files], dtype=np.float64)
    return images, labels
