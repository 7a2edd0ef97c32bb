"""Probabilistic CLS routing and the border-patch drop rule.

The CLS token joins the source side with probability ``p_source`` and the
target side otherwise.  When it joins the source under stripe masking, the
last row-major source patch is dropped so the source token count stays
constant across the batch; for full-axis stripes that patch provably lies on
the grid border, which makes it safe to discard.  The dropped patch belongs
to neither effective set and never enters the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masking import GridSpec, MaskPair


@dataclass(frozen=True)
class ClsPolicy:
    p_source: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_source <= 1.0:
            raise ValueError(f"p_source must lie in [0, 1], got {self.p_source}")


@dataclass(frozen=True)
class TokenPartition:
    """A MaskPair plus the CLS routing decision and any dropped border patch."""

    mask: MaskPair
    cls_in_source: bool
    dropped_patch: int | None = None

    def __post_init__(self) -> None:
        if self.dropped_patch is not None and not self.cls_in_source:
            raise ValueError("a patch may only be dropped when CLS joins the source")

    @property
    def source_patches(self) -> np.ndarray:
        """Source patch indices after any drop (CLS excluded)."""
        if self.dropped_patch is None:
            return self.mask.source
        return self.mask.source[:-1]

    @property
    def target_patches(self) -> np.ndarray:
        return self.mask.target

    @property
    def num_source_tokens(self) -> int:
        return self.source_patches.size + (1 if self.cls_in_source else 0)

    @property
    def num_target_tokens(self) -> int:
        return self.target_patches.size + (0 if self.cls_in_source else 1)


def assign_cls(
    mask: MaskPair,
    policy: ClsPolicy,
    rng: np.random.Generator,
    grid: GridSpec | None = None,
    apply_drop: bool = False,
) -> TokenPartition:
    """Route CLS by a Bernoulli(p_source) draw; optionally apply the drop rule.

    ``apply_drop`` should be set only for stripe masks, whose last source
    patch is guaranteed to sit on the border.
    """
    b = bool(rng.random() < policy.p_source)
    partition = TokenPartition(mask=mask, cls_in_source=b)
    if b and apply_drop:
        if grid is None:
            raise ValueError("apply_drop requires the grid to validate border membership")
        partition = apply_border_drop(partition, grid)
    return partition


def apply_border_drop(partition: TokenPartition, grid: GridSpec) -> TokenPartition:
    """Drop the final row-major source patch, recording it on the partition.

    No-op when CLS went to the target side.  A dropped patch off the grid
    border signals a mask-generation bug and raises.
    """
    if not partition.cls_in_source:
        return partition
    if partition.dropped_patch is not None:
        raise ValueError("border drop already applied")
    source = partition.mask.source
    if source.size == 0:
        raise ValueError("cannot drop from an empty source")
    dropped = int(source[-1])
    if not grid.is_border(dropped):
        raise RuntimeError(
            f"dropped patch {dropped} is not on the grid border; "
            "the mask did not come from a full-axis stripe"
        )
    return TokenPartition(mask=partition.mask, cls_in_source=True, dropped_patch=dropped)
