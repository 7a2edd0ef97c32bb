"""Frozen-feature evaluation heads and their metrics.

Two heads: a single-query cross-attention pooler over per-patch latents
(optionally with the CLS latent appended as an extra token) and a
one-hidden-layer perceptron over the CLS latent alone.  Only the head is
trained; features arrive precomputed so the encoder cannot drift.  Splits,
init, and minibatch order are all derived from the probe seed.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import normalize_images
from .vit import Encoder

PATCHES = "patches"
CLS = "cls"
PATCHES_PLUS_CLS = "patches_plus_cls"
FEATURE_MODES = (PATCHES, CLS, PATCHES_PLUS_CLS)

ATTENTIVE_POOLER = "attentive_pooler"
MLP = "mlp"

REGRESSION = "regression"
CLASSIFICATION = "classification"


@dataclass(frozen=True)
class ProbeConfig:
    feature_mode: str = PATCHES
    head: str = ATTENTIVE_POOLER
    hidden_dim: int = 512
    num_heads: int | None = None  # attentive pooler; None = decided by caller
    task: str = REGRESSION
    num_classes: int = 2
    train_fraction: float = 0.8
    seed: int = 0
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    patience: int = 10

    def __post_init__(self) -> None:
        if self.feature_mode not in FEATURE_MODES:
            raise ValueError(f"unknown feature mode {self.feature_mode!r}")
        if self.head not in (ATTENTIVE_POOLER, MLP):
            raise ValueError(f"unknown head {self.head!r}")
        if self.feature_mode == CLS and self.head != MLP:
            raise ValueError("cls features pair with the mlp head")
        if self.feature_mode != CLS and self.head != ATTENTIVE_POOLER:
            raise ValueError("patch features pair with the attentive pooler")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown task {self.task!r}")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")

    def hash(self) -> str:
        return hashlib.sha256(repr(self).encode("utf-8")).hexdigest()[:12]


@dataclass(frozen=True)
class ProbeReport:
    task: str
    r_squared: float | None
    mae: float | None
    accuracy: float | None
    n_train: int
    n_eval: int
    seed: int
    config_hash: str

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                value = "undefined"
            elif isinstance(value, float):
                value = f"{value:.6f}"
            lines.append(f"{f.name}: {value}")
        return "\n".join(lines) + "\n"


RESULTS_FIELDS = ("config_hash", "task", "seed", "n_train", "n_eval", "r_squared", "mae", "accuracy")


def append_report_csv(path: str | Path, report: ProbeReport) -> None:
    import csv

    path = Path(path)
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(RESULTS_FIELDS)
        writer.writerow(
            ["" if getattr(report, k) is None else getattr(report, k) for k in RESULTS_FIELDS]
        )


class AttentivePooler(nn.Module):
    """One learnable query cross-attending over token latents."""

    def __init__(self, dim: int, num_heads: int = 1):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.query = nn.Parameter(torch.zeros(dim))
        self.norm = nn.LayerNorm(dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.query, std=0.02)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """[B, T, D] -> [B, D]; softmax over a single token is the identity."""
        if tokens.ndim != 3 or tokens.shape[1] < 1:
            raise ValueError(f"expected non-empty [B, T, D] tokens, got {tuple(tokens.shape)}")
        B, T, D = tokens.shape
        h = self.num_heads
        x = self.norm(tokens)
        q = self.query.view(1, 1, h, D // h).transpose(1, 2).expand(B, -1, -1, -1)
        k = self.to_k(x).view(B, T, h, D // h).transpose(1, 2)
        v = self.to_v(x).view(B, T, h, D // h).transpose(1, 2)
        pooled = F.scaled_dot_product_attention(q, k, v)
        return self.proj(pooled.transpose(1, 2).reshape(B, D))


def attentive_pool(tokens: torch.Tensor, pooler: AttentivePooler) -> torch.Tensor:
    return pooler(tokens)


class AttentiveProbe(nn.Module):
    def __init__(self, dim: int, out_dim: int, num_heads: int = 1):
        super().__init__()
        self.pooler = AttentivePooler(dim, num_heads)
        self.head = nn.Linear(dim, out_dim)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.head(self.pooler(tokens))


class MlpProbe(nn.Module):
    """Single-hidden-layer perceptron over a vector feature."""

    def __init__(self, dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


def split_indices(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffled train/eval split."""
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    n_train = min(max(n_train, 1), n - 1)
    return perm[:n_train], perm[n_train:]


def r_squared(predictions: np.ndarray, labels: np.ndarray) -> float | None:
    ss_tot = float(((labels - labels.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return None  # degenerate labels: undefined
    ss_res = float(((labels - predictions) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def _build_head(features: torch.Tensor, config: ProbeConfig) -> nn.Module:
    out_dim = 1 if config.task == REGRESSION else config.num_classes
    dim = features.shape[-1]
    if config.head == MLP:
        if features.ndim != 2:
            raise ValueError("cls features must be [N, D]")
        return MlpProbe(dim, config.hidden_dim, out_dim)
    if features.ndim != 3:
        raise ValueError("patch features must be [N, T, D]")
    return AttentiveProbe(dim, out_dim, num_heads=config.num_heads or 1)


def fit_probe(
    features: np.ndarray | torch.Tensor,
    labels: np.ndarray,
    config: ProbeConfig,
) -> tuple[nn.Module, ProbeReport]:
    """Train a head on frozen features; report held-out metrics.

    Regression targets are standardized internally using train-split
    statistics (predictions are mapped back, so reported metrics are in
    label units).  Early-stops on held-out loss with the configured
    patience, restoring the best head.
    """
    feats = torch.as_tensor(features, dtype=torch.float32)
    labels = np.asarray(labels)
    if feats.shape[0] != labels.shape[0]:
        raise ValueError(f"{feats.shape[0]} feature rows vs {labels.shape[0]} labels")
    train_idx, eval_idx = split_indices(feats.shape[0], config.train_fraction, config.seed)

    torch.manual_seed(config.seed)
    head = _build_head(feats, config)

    if config.task == REGRESSION:
        y = torch.as_tensor(labels, dtype=torch.float32).reshape(-1, 1)
        y_mean = y[train_idx].mean()
        y_std = y[train_idx].std()
        y_scale = y_std if float(y_std) > 0 else torch.ones(())
        y_norm = (y - y_mean) / y_scale
        loss_fn = lambda out, idx: F.mse_loss(out, y_norm[idx])
    else:
        y_cls = torch.as_tensor(labels, dtype=torch.long)
        if y_cls.min() < 0 or y_cls.max() >= config.num_classes:
            raise ValueError("classification labels out of range")
        loss_fn = lambda out, idx: F.cross_entropy(out, y_cls[idx])

    optimizer = torch.optim.AdamW(
        head.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    shuffle_rng = np.random.default_rng(config.seed + 1)
    best_loss = math.inf
    best_state = copy.deepcopy(head.state_dict())
    stale = 0
    for _epoch in range(config.epochs):
        order = shuffle_rng.permutation(train_idx)
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            optimizer.zero_grad(set_to_none=True)
            loss = loss_fn(head(feats[idx]), idx)
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            held_out = float(loss_fn(head(feats[eval_idx]), eval_idx))
        if held_out < best_loss - 1e-9:
            best_loss = held_out
            best_state = copy.deepcopy(head.state_dict())
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
    head.load_state_dict(best_state)

    with torch.no_grad():
        out = head(feats[eval_idx])
    if config.task == REGRESSION:
        preds = (out * y_scale + y_mean).numpy().ravel()
        truth = labels[eval_idx].astype(np.float64)
        report = ProbeReport(
            task=REGRESSION,
            r_squared=r_squared(preds, truth),
            mae=float(np.abs(preds - truth).mean()),
            accuracy=None,
            n_train=train_idx.size,
            n_eval=eval_idx.size,
            seed=config.seed,
            config_hash=config.hash(),
        )
    else:
        pred_cls = out.argmax(dim=1).numpy()
        report = ProbeReport(
            task=CLASSIFICATION,
            r_squared=None,
            mae=None,
            accuracy=float((pred_cls == labels[eval_idx]).mean()),
            n_train=train_idx.size,
            n_eval=eval_idx.size,
            seed=config.seed,
            config_hash=config.hash(),
        )
    return head, report


@torch.no_grad()
def extract_features(
    encoder: Encoder,
    images: np.ndarray,
    batch_size: int = 64,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen full-grid encoding: (cls [N, D], patches [N, T, D]) float32."""
    cls_parts, patch_parts = [], []
    for start in range(0, images.shape[0], batch_size):
        batch = torch.as_tensor(normalize_images(images[start : start + batch_size]))
        cls_lat, patch_lat = encoder.full_forward(batch)
        cls_parts.append(cls_lat.numpy())
        patch_parts.append(patch_lat.numpy())
    return np.concatenate(cls_parts), np.concatenate(patch_parts)


def combine_features(cls_lat: np.ndarray, patch_lat: np.ndarray, mode: str) -> np.ndarray:
    if mode == CLS:
        return cls_lat
    if mode == PATCHES:
        return patch_lat
    if mode == PATCHES_PLUS_CLS:
        return np.concatenate([cls_lat[:, None, :], patch_lat], axis=1)
    raise ValueError(f"unknown feature mode {mode!r}")


def evaluate_encoder(
    encoder: Encoder,
    images: np.ndarray,
    labels: np.ndarray,
    config: ProbeConfig,
    batch_size: int = 64,
) -> ProbeReport:
    """Extract frozen features per the configured mode and fit the probe."""
    if config.num_heads is None and config.head == ATTENTIVE_POOLER:
        config = dataclasses.replace(config, num_heads=encoder.config.num_heads)
    cls_lat, patch_lat = extract_features(encoder, images, batch_size)
    feats = combine_features(cls_lat, patch_lat, config.feature_mode)
    _, report = fit_probe(feats, labels, config)
    return report
