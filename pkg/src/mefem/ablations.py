"""Ablation matrix: masking variants and CLS-routing x probe-feature rows.

Eight pretraining runs feed fourteen probe reports: five masking rows
(stripe widths 2/3/4, quadrant, multiblock) probed on patch features, and
three CLS-routing probabilities (0, 0.5, 1) each probed with patches, CLS,
and patches+CLS features.  Every run is seeded and emits a standard
ProbeReport, so rows are directly comparable and reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .probe import ATTENTIVE_POOLER, CLS, MLP, ProbeConfig, ProbeReport, evaluate_encoder
from .trainer import train_loop

MASKING_ROWS: tuple[tuple[str, dict], ...] = (
    ("stripe_w2", {"mask_strategy": "stripe", "stripe_width": 2}),
    ("stripe_w3", {"mask_strategy": "stripe", "stripe_width": 3}),
    ("stripe_w4", {"mask_strategy": "stripe", "stripe_width": 4}),
    ("quadrant", {"mask_strategy": "quadrant"}),
    ("multiblock", {"mask_strategy": "multiblock"}),
)

CLS_PROBABILITIES = (0.0, 0.5, 1.0)
FEATURE_MODES = ("patches", "cls", "patches_plus_cls")

# deliberately small: the matrix checks end-to-end runnability, not quality
MICRO_ABLATION_CONFIG = TrainConfig(
    embed_dim=32,
    depth=2,
    num_heads=2,
    predictor_depth=1,
    batch_size=16,
    epochs=2,
    patches_per_axis=14,
    patch_size=4,
)


@dataclass(frozen=True)
class AblationRow:
    name: str
    feature_mode: str
    report: ProbeReport


def _probe_config(feature_mode: str, seed: int, epochs: int) -> ProbeConfig:
    head = MLP if feature_mode == CLS else ATTENTIVE_POOLER
    return ProbeConfig(feature_mode=feature_mode, head=head, seed=seed, epochs=epochs,
                       hidden_dim=128)


def run_ablation_matrix(
    images: np.ndarray,
    labels: np.ndarray,
    out_dir: str | Path,
    base_config: TrainConfig = MICRO_ABLATION_CONFIG,
    probe_epochs: int = 10,
    seed: int = 0,
) -> list[AblationRow]:
    out_dir = Path(out_dir)
    rows: list[AblationRow] = []

    def train(name: str, **overrides) -> "object":
        config = base_config.replace(seed=seed, **overrides)
        state, _ = train_loop(config, images, out_dir / name)
        return state.encoder

    for name, overrides in MASKING_ROWS:
        encoder = train(name, **overrides)
        report = evaluate_encoder(
            encoder, images, labels, _probe_config("patches", seed, probe_epochs)
        )
        rows.append(AblationRow(name=name, feature_mode="patches", report=report))

    for p in CLS_PROBABILITIES:
        name = f"cls_p{p:g}"
        encoder = train(name, cls_p_source=p)
        for mode in FEATURE_MODES:
            report = evaluate_encoder(
                encoder, images, labels, _probe_config(mode, seed, probe_epochs)
            )
            rows.append(AblationRow(name=name, feature_mode=mode, report=report))
    return rows


def rows_to_table(rows: list[AblationRow]) -> str:
    lines = [f"{'run':<12} {'features':<17} {'r2':>8} {'mae':>8}"]
    for row in rows:
        r2 = "nan" if row.report.r_squared is None else f"{row.report.r_squared:.4f}"
        mae = "nan" if row.report.mae is None else f"{row.report.mae:.4f}"
        lines.append(f"{row.name:<12} {row.feature_mode:<17} {r2:>8} {mae:>8}")
    return "\n".join(lines)
