"""Face-crop pipeline over externally supplied bounding boxes.

Detection is assumed done upstream; a manifest CSV supplies ``path,x,y,w,h``
records.  Each box is expanded to a square of side 2 * max(w, h) centered on
the box center, rejected when that side falls below the target resolution or
when the square leaves the image, and otherwise cropped and bilinearly
resized to the grid's image size.  Rejection is decided before any
resampling work.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .masking import GridSpec

ACCEPTED = "accepted"
REJECTED_BOUNDARY = "rejected_boundary"
REJECTED_RESOLUTION = "rejected_resolution"
UNREADABLE = "unreadable"

# Per-channel standardization constants applied after scaling pixels to
# [0, 1]; the widely used ImageNet statistics.
IMAGE_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGE_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def normalize_images(images: np.ndarray) -> np.ndarray:
    """uint8 [..., H, W, 3] -> standardized float32 [..., 3, H, W]."""
    if images.dtype != np.uint8 or images.shape[-1] != 3:
        raise ValueError(f"expected uint8 [..., H, W, 3] images, got {images.dtype} {images.shape}")
    x = images.astype(np.float32) / 255.0
    x = (x - IMAGE_MEAN) / IMAGE_STD
    return np.moveaxis(x, -1, -3)


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    width: float
    height: float

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bbox must have positive extent, got {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.width / 2, self.y + self.height / 2)


@dataclass(frozen=True)
class CropOutcome:
    status: str
    crop: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.status == ACCEPTED) != (self.crop is not None):
            raise ValueError("crop must be present exactly when status is accepted")


def crop_square(bbox: BBox) -> tuple[int, int, int]:
    """(left, top, side) of the 2x expanded square in integer pixel coordinates.

    The center is kept in continuous coordinates; a fractional side is rounded
    outward, displacing each edge by at most one pixel.
    """
    side = 2.0 * max(bbox.width, bbox.height)
    side_int = int(math.ceil(side))
    cx, cy = bbox.center
    left = int(math.floor(cx - side_int / 2))
    top = int(math.floor(cy - side_int / 2))
    return left, top, side_int


def crop_face(image: np.ndarray, bbox: BBox, grid: GridSpec, min_side: int | None = None) -> CropOutcome:
    """Apply the square-expansion rule; reject on resolution, then on bounds.

    The resolution rule uses the continuous side 2 * max(w, h) and is checked
    first, so an undersized box is rejected regardless of its position.
    """
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected uint8 [H, W, 3] image, got {image.dtype} {image.shape}")
    height, width = image.shape[:2]
    if bbox.x < 0 or bbox.y < 0 or bbox.x + bbox.width > width or bbox.y + bbox.height > height:
        raise ValueError(f"bbox {bbox} exceeds image bounds {width}x{height}")
    threshold = grid.image_size if min_side is None else min_side
    if 2.0 * max(bbox.width, bbox.height) < threshold:
        return CropOutcome(status=REJECTED_RESOLUTION)
    left, top, side = crop_square(bbox)
    if left < 0 or top < 0 or left + side > width or top + side > height:
        return CropOutcome(status=REJECTED_BOUNDARY)
    square = image[top : top + side, left : left + side]
    resized = Image.fromarray(square).resize(
        (grid.image_size, grid.image_size), resample=Image.BILINEAR
    )
    return CropOutcome(status=ACCEPTED, crop=np.asarray(resized, dtype=np.uint8))


def read_manifest(path: str | Path) -> list[tuple[str, BBox]]:
    """Parse ``path,x,y,w,h`` rows; a non-numeric first data field is a header."""
    records: list[tuple[str, BBox]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) != 5:
                raise ValueError(f"manifest row must have 5 fields, got {row}")
            try:
                x, y, w, h = (float(cell) for cell in row[1:])
            except ValueError:
                if not records:
                    continue  # header row
                raise
            records.append((row[0].strip(), BBox(x=x, y=y, width=w, height=h)))
    return records


def _process_record(args: tuple) -> str:
    i, path, bbox, grid, min_side, out_dir = args
    try:
        image = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    except OSError:
        return UNREADABLE
    outcome = crop_face(image, bbox, grid, min_side=min_side)
    if outcome.status == ACCEPTED:
        name = f"crop_{i:06d}_{Path(path).stem}.png"
        Image.fromarray(outcome.crop).save(Path(out_dir) / name)
    return outcome.status


def run_manifest(
    manifest_path: str | Path,
    out_dir: str | Path,
    grid: GridSpec | None = None,
    min_side: int | None = None,
    workers: int = 1,
) -> Counter:
    """Crop every manifest record, writing accepted PNGs and a summary file.

    Unreadable images are counted separately and do not stop the run.
    Records are independent, so the worker count never changes the outputs.
    Returns the per-status counts.
    """
    from .export import atomic_write_text

    grid = grid if grid is not None else GridSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = read_manifest(manifest_path)
    jobs = [(i, path, bbox, grid, min_side, out_dir) for i, (path, bbox) in enumerate(records)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(_process_record, jobs))
    else:
        statuses = [_process_record(job) for job in jobs]
    counts = Counter(statuses)
    total = len(records)
    summary = (
        f"total = {total}\n"
        f"accepted = {counts[ACCEPTED]}\n"
        f"rejected_boundary = {counts[REJECTED_BOUNDARY]}\n"
        f"rejected_resolution = {counts[REJECTED_RESOLUTION]}\n"
        f"unreadable = {counts[UNREADABLE]}\n"
    )
    atomic_write_text(out_dir / "summary.txt", summary)
    return counts
