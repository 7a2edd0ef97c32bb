"""Per-patch loss weights from a radial sigmoid, plus the uniform ablation.

The circular scheme keeps weights near 1 inside a central disc and decays
them smoothly towards the grid corners: w(r) = 1 / (1 + exp(steepness * (r -
falloff_radius))), with r the Euclidean distance in patch units from a patch
center to the geometric grid center.  The CLS token always carries weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import GridSpec

CIRCULAR = "circular"
UNIFORM = "uniform"


@dataclass(frozen=True)
class WeightConfig:
    falloff_radius: float = 5.0
    steepness: float = 1.5
    scheme: str = CIRCULAR

    def __post_init__(self) -> None:
        if not self.falloff_radius > 0:
            raise ValueError(f"falloff_radius must be > 0, got {self.falloff_radius}")
        if not self.steepness > 0:
            raise ValueError(f"steepness must be > 0, got {self.steepness}")
        if self.scheme not in (CIRCULAR, UNIFORM):
            raise ValueError(f"unknown weight scheme {self.scheme!r}")


@dataclass(frozen=True)
class WeightMatrix:
    """LxL patch weights in (0, 1] plus the pinned CLS weight."""

    weights: np.ndarray
    cls_weight: float = 1.0

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", weights)
        if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
            raise ValueError(f"weights must be a square matrix, got shape {weights.shape}")
        if np.any(weights <= 0) or np.any(weights > 1):
            raise ValueError("weights must lie in (0, 1]")
        if self.cls_weight != 1.0:
            raise ValueError(f"cls_weight is pinned to 1, got {self.cls_weight}")

    def flat(self) -> np.ndarray:
        """Row-major view, aligned with patch indices."""
        return self.weights.ravel()

    def for_patches(self, indices: np.ndarray) -> np.ndarray:
        return self.flat()[np.asarray(indices, dtype=np.int64)]


def patch_center_distances(grid: GridSpec) -> np.ndarray:
    """Distance in patch units from each patch center to the grid center.

    Patch (i, j) has center (i + 0.5, j + 0.5); the grid center is (L/2, L/2),
    which is not itself a patch center for even L.  The arithmetic keeps the
    full dihedral symmetry of the grid bit-exact.
    """
    L = grid.patches_per_axis
    offsets = np.arange(L, dtype=np.float64) + 0.5 - L / 2
    di = np.abs(offsets)[:, None]
    dj = np.abs(offsets)[None, :]
    return np.sqrt(di * di + dj * dj)


def build_weight_matrix(grid: GridSpec, config: WeightConfig) -> WeightMatrix:
    L = grid.patches_per_axis
    if config.scheme == UNIFORM:
        return WeightMatrix(weights=np.ones((L, L), dtype=np.float64))
    r = patch_center_distances(grid)
    w = 1.0 / (1.0 + np.exp(config.steepness * (r - config.falloff_radius)))
    return WeightMatrix(weights=w)
