"""Procedural face-like images with known latent attributes.

Each image is a centered soft-edged ellipse ("face") with two eyes and a
mouth over a textured background.  Rendering is a pure function of the
attribute record: the background texture and jitter direction are seeded by
hashing the attributes, so the same record always yields the same pixels.
The face stays inside the central high-weight disc of the default circular
loss weighting, mirroring the centered-crop guarantee of the real pipeline.
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .masking import GridSpec

ATTRIBUTE_RANGES = {
    "face_scale": (0.35, 0.6),  # face height as a fraction of the frame
    "eccentricity": (0.7, 1.0),  # width/height ratio of the face ellipse
    "brightness": (0.3, 0.9),
    "eye_spacing": (0.25, 0.45),  # fraction of face width between eye centers
    "jitter": (0.0, 6.0),  # face center offset magnitude, pixels at 224
}

ATTRIBUTE_NAMES = tuple(ATTRIBUTE_RANGES)


@dataclass(frozen=True)
class FaceAttributes:
    face_scale: float
    eccentricity: float
    brightness: float
    eye_spacing: float
    jitter: float

    def __post_init__(self) -> None:
        for name, (lo, hi) in ATTRIBUTE_RANGES.items():
            value = getattr(self, name)
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside documented range [{lo}, {hi}]")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def sample_attributes(rng: np.random.Generator) -> FaceAttributes:
    values = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in ATTRIBUTE_RANGES.items()}
    return FaceAttributes(**values)


def _derived_rng(attrs: FaceAttributes) -> np.random.Generator:
    packed = struct.pack("<5d", *(getattr(attrs, n) for n in ATTRIBUTE_NAMES))
    digest = hashlib.blake2b(packed, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _soft_ellipse(yy: np.ndarray, xx: np.ndarray, cx: float, cy: float,
                  rx: float, ry: float, edge: float = 1.5) -> np.ndarray:
    """Coverage in [0, 1] with a smooth edge about ``edge`` pixels wide."""
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    ramp = edge / max(rx, ry)
    return np.clip((1.0 - d) / ramp + 0.5, 0.0, 1.0)


def generate(
    attrs: FaceAttributes | None,
    grid: GridSpec | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, FaceAttributes]:
    """Render one face; samples the attributes from ``rng`` when not given.

    Returns (uint8 [S, S, 3] image, attributes).
    """
    grid = grid if grid is not None else GridSpec()
    if attrs is None:
        if rng is None:
            raise ValueError("either attrs or rng must be provided")
        attrs = sample_attributes(rng)
    size = grid.image_size
    scale = size / 224.0  # attribute pixel units are defined at 224
    texture_rng = _derived_rng(attrs)

    # Background: low-frequency clutter, independent of face attributes.
    coarse = texture_rng.uniform(0.1, 0.75, size=(7, 7, 3))
    ups = np.repeat(np.repeat(coarse, size // 7 + 1, axis=0), size // 7 + 1, axis=1)
    img = ups[:size, :size].copy()

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    angle = texture_rng.uniform(0.0, 2.0 * np.pi)
    cx = size / 2 + attrs.jitter * scale * np.cos(angle)
    cy = size / 2 + attrs.jitter * scale * np.sin(angle)
    ry = attrs.face_scale * size / 2
    rx = ry * attrs.eccentricity

    skin = attrs.brightness * np.array([1.0, 0.86, 0.72])
    face = _soft_ellipse(yy, xx, cx, cy, rx, ry)
    img = img * (1 - face[..., None]) + face[..., None] * skin

    feature_color = np.array([0.08, 0.05, 0.05])
    eye_dx = attrs.eye_spacing * rx
    eye_r = 0.14 * rx
    for sign in (-1.0, 1.0):
        eye = _soft_ellipse(yy, xx, cx + sign * eye_dx, cy - 0.35 * ry, eye_r, eye_r)
        img = img * (1 - eye[..., None]) + eye[..., None] * feature_color
    mouth = _soft_ellipse(yy, xx, cx, cy + 0.45 * ry, 0.45 * rx, 0.1 * ry)
    img = img * (1 - mouth[..., None]) + mouth[..., None] * feature_color

    return (np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), attrs


def _render_one(args: tuple) -> tuple[np.ndarray, "FaceAttributes"]:
    seed_seq, grid = args
    return generate(None, grid, np.random.default_rng(seed_seq))


def make_dataset(
    count: int,
    seed: int,
    grid: GridSpec | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, list[FaceAttributes]]:
    """Generate ``count`` images with per-sample spawned streams.

    Per-sample streams make the output independent of iteration order, so the
    same (count, seed) pair is reproducible under any worker count.
    """
    grid = grid if grid is not None else GridSpec()
    streams = np.random.SeedSequence(seed).spawn(count)
    jobs = [(ss, grid) for ss in streams]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(_render_one, jobs, chunksize=32))
    else:
        rendered = [_render_one(job) for job in jobs]
    images = np.stack([image for image, _ in rendered])
    attrs = [a for _, a in rendered]
    return images, attrs


def write_attributes_csv(path: str | Path, names: list[str], attrs: list[FaceAttributes]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", *ATTRIBUTE_NAMES])
        for name, a in zip(names, attrs):
            writer.writerow([name] + [f"{getattr(a, field):.8f}" for field in ATTRIBUTE_NAMES])


def read_attributes_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Returns (filenames, float array [N, len(ATTRIBUTE_NAMES)])."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "filename" or tuple(header[1:]) != ATTRIBUTE_NAMES:
            raise ValueError(f"unexpected attributes header {header}")
        names, rows = [], []
        for row in reader:
            names.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return names, np.asarray(rows, dtype=np.float64)
