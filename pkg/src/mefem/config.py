"""Training configuration: a flat dataclass, readable from `key = value` files.

File format: UTF-8 text, one `key = value` per line, `#` starts a comment,
blank lines ignored.  Every field of :class:`TrainConfig` is addressable by
its field name.  Optional integer fields accept ``auto``.  Precedence is
resolved by the caller (CLI flags > file values > defaults).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .masking import (
    DEFAULT_MULTIBLOCK_MODES,
    GridSpec,
    MaskingConfig,
    MultiblockParams,
    StripeParams,
)
from .tokens import ClsPolicy
from .vit import EncoderConfig, PredictorConfig
from .weights import WeightConfig


@dataclass(frozen=True)
class TrainConfig:
    # data / loop
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    checkpoint_every: int = 1  # epochs
    # optimizer
    learning_rate: float = 1e-3
    weight_decay: float = 0.04
    warmup_steps: int | None = None  # None = 10% of total steps
    # EMA teacher momentum, interpolated linearly over training
    ema_momentum_start: float = 0.996
    ema_momentum_end: float = 1.0
    # masking
    mask_strategy: str = "stripe"
    stripe_width: int = 3
    stripe_spread: float = 0.175
    stripe_orientation: str = "random"
    multiblock_num_blocks: int | None = None  # None = built-in two-mode mixture
    multiblock_scale_min: float = 0.15
    multiblock_scale_max: float = 0.2
    multiblock_aspect_min: float = 0.75
    multiblock_aspect_max: float = 1.5
    # CLS routing
    cls_p_source: float = 0.5
    # loss
    loss_distance: str = "smooth_l1"
    smooth_l1_beta: float = 1.0
    weight_scheme: str = "circular"
    weight_falloff_radius: float = 5.0
    weight_steepness: float = 1.5
    # model
    patches_per_axis: int = 14
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    predictor_depth: int = 4
    predictor_dim: int | None = None  # None = embed_dim // 2
    target_full_context: bool = False

    def __post_init__(self) -> None:
        for name in ("batch_size", "epochs", "checkpoint_every"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.ema_momentum_start <= 1.0 or not 0.0 <= self.ema_momentum_end <= 1.0:
            raise ValueError("ema momentum schedule must lie within [0, 1]")
        # lr = 0 is allowed: it isolates the EMA update path in tests
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.smooth_l1_beta <= 0:
            raise ValueError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")
        if self.loss_distance not in ("smooth_l1", "l2"):
            raise ValueError(f"unknown loss distance {self.loss_distance!r}")

    # ---- derived views -------------------------------------------------

    def grid(self) -> GridSpec:
        return GridSpec(patches_per_axis=self.patches_per_axis, patch_size=self.patch_size)

    def masking(self) -> MaskingConfig:
        if self.multiblock_num_blocks is None:
            modes = DEFAULT_MULTIBLOCK_MODES
        else:
            modes = (
                MultiblockParams(
                    num_blocks=self.multiblock_num_blocks,
                    scale_range=(self.multiblock_scale_min, self.multiblock_scale_max),
                    aspect_range=(self.multiblock_aspect_min, self.multiblock_aspect_max),
                ),
            )
        return MaskingConfig(
            strategy=self.mask_strategy,
            stripe=StripeParams(
                width=self.stripe_width,
                center_spread=self.stripe_spread,
                orientation=self.stripe_orientation,
            ),
            multiblock=modes,
        )

    def cls_policy(self) -> ClsPolicy:
        return ClsPolicy(p_source=self.cls_p_source)

    def weight_config(self) -> WeightConfig:
        return WeightConfig(
            falloff_radius=self.weight_falloff_radius,
            steepness=self.weight_steepness,
            scheme=self.weight_scheme,
        )

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            embed_dim=self.embed_dim,
            depth=self.depth,
            num_heads=self.num_heads,
            mlp_ratio=self.mlp_ratio,
            grid=self.grid(),
        )

    def predictor_config(self) -> PredictorConfig:
        return PredictorConfig(depth=self.predictor_depth, embed_dim=self.predictor_dim)

    # ---- (de)serialization ----------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'auto' if value is None else value}")
        return "\n".join(lines) + "\n"

    def replace(self, **updates: Any) -> "TrainConfig":
        return dataclasses.replace(self, **updates)

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base if base is not None else cls()
        fields = {f.name: f for f in dataclasses.fields(cls)}
        updates: dict[str, Any] = {}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            updates[key] = _coerce(raw, fields[key].type, key)
        return dataclasses.replace(base, **updates)


def _coerce(raw: Any, annotation: str | type, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    ann = annotation if isinstance(annotation, str) else getattr(annotation, "__name__", str(annotation))
    if text.lower() in ("auto", "none") and "None" in ann:
        return None
    if ann.startswith("bool"):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key!r}: expected a boolean, got {text!r}")
    if ann.startswith("int"):
        return int(text)
    if ann.startswith("float"):
        return float(text)
    return text


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))
