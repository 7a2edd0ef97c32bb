"""Weighted latent-prediction training: loss, step, loop, and collapse stats.

Per sample the pipeline draws a mask, routes the CLS token, and (for
stripes) drops the border patch; the student encoder sees the source tokens,
the EMA teacher sees the target tokens without gradient, and the predictor
fills in the target latents.  Losses are per-token distances averaged over
embedding dimensions, weighted per patch by the circular scheme (CLS weight
pinned to 1), and normalized by the target token count.

Batches are bucketed by shape-relevant keys (CLS side plus token counts) so
every forward pass is rectangular without padding.  A single explicit RNG
stream drives shuffling, masking, and CLS routing, which together with the
checkpointed optimizer and RNG state makes interrupted runs bit-identical to
uninterrupted ones.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import TrainConfig
from .masking import MaskingConfig
from .preprocess import normalize_images
from .tokens import assign_cls
from .vit import Encoder, Predictor, build_models, ema_update
from .weights import WeightMatrix, build_weight_matrix

SMOOTH_L1 = "smooth_l1"
L2 = "l2"

METRICS_FIELDS = ("step", "loss", "grad_norm", "momentum", "wall_ms")


@dataclass(frozen=True)
class LossConfig:
    distance: str = SMOOTH_L1
    smooth_l1_beta: float = 1.0

    def __post_init__(self) -> None:
        if self.distance not in (SMOOTH_L1, L2):
            raise ValueError(f"unknown distance {self.distance!r}")
        if not self.smooth_l1_beta > 0:
            raise ValueError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")


def token_distance(
    predicted: torch.Tensor,
    reference: torch.Tensor,
    config: LossConfig = LossConfig(),
) -> torch.Tensor:
    """Per-token distance, averaged over embedding dimensions."""
    if config.distance == SMOOTH_L1:
        elementwise = torch.nn.functional.smooth_l1_loss(
            predicted, reference, reduction="none", beta=config.smooth_l1_beta
        )
    else:
        elementwise = (predicted - reference) ** 2
    return elementwise.mean(dim=-1)


def jepa_loss(
    predicted: torch.Tensor,
    reference: torch.Tensor,
    weights: torch.Tensor,
    config: LossConfig = LossConfig(),
) -> torch.Tensor:
    """(1 / T) * sum_i w_i * d(pred_i, ref_i), batch-averaged when batched.

    ``predicted``/``reference`` are [T, D] or [B, T, D]; ``weights`` matches
    without the embedding axis.  The reference must not require gradients.
    """
    if predicted.ndim not in (2, 3):
        raise ValueError(f"expected [T, D] or [B, T, D] latents, got {tuple(predicted.shape)}")
    if predicted.shape != reference.shape:
        raise ValueError(f"shape mismatch: {tuple(predicted.shape)} vs {tuple(reference.shape)}")
    if weights.shape != predicted.shape[:-1]:
        raise ValueError(
            f"weights shape {tuple(weights.shape)} does not match tokens {tuple(predicted.shape[:-1])}"
        )
    if predicted.shape[-2] < 1:
        raise ValueError("need at least one token")
    if reference.requires_grad:
        raise ValueError("reference latents must be detached (no gradient to the teacher)")
    if not torch.isfinite(predicted).all() or not torch.isfinite(reference).all():
        raise ValueError("non-finite latents in loss")
    d = token_distance(predicted, reference, config)
    per_sample = (weights * d).sum(dim=-1) / d.shape[-1]
    return per_sample.mean()


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def momentum_at(step: int, total_steps: int, start: float, end: float) -> float:
    progress = step / max(total_steps - 1, 1)
    return start + (end - start) * progress


@dataclass
class TrainState:
    config: TrainConfig
    encoder: Encoder
    teacher: Encoder
    predictor: Predictor
    optimizer: torch.optim.AdamW
    weight_matrix: WeightMatrix
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    total_steps: int = 0

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.predictor.parameters())


def init_train_state(
    config: TrainConfig,
    num_images: int,
    dtype: torch.dtype = torch.float32,
) -> TrainState:
    encoder, teacher, predictor = build_models(
        config.encoder_config(), config.predictor_config(), seed=config.seed, dtype=dtype
    )
    optimizer = torch.optim.AdamW(
        list(encoder.parameters()) + list(predictor.parameters()),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    steps_per_epoch = max(1, math.ceil(num_images / config.batch_size))
    return TrainState(
        config=config,
        encoder=encoder,
        teacher=teacher,
        predictor=predictor,
        optimizer=optimizer,
        weight_matrix=build_weight_matrix(config.grid(), config.weight_config()),
        rng=np.random.default_rng(config.seed),
        total_steps=max(1, config.epochs * steps_per_epoch),
    )


def _resolved_warmup(config: TrainConfig, total_steps: int) -> int:
    if config.warmup_steps is not None:
        return config.warmup_steps
    return math.ceil(0.1 * total_steps)


def sample_batch_partitions(state: TrainState, batch_size: int) -> list:
    """Draw one (mask, CLS routing, drop) partition per sample, in order."""
    config = state.config
    grid = config.grid()
    masking = config.masking()
    policy = config.cls_policy()
    return [
        assign_cls(
            masking.sample(grid, state.rng),
            policy,
            state.rng,
            grid=grid,
            apply_drop=masking.drops_border_patch,
        )
        for _ in range(batch_size)
    ]


def _bucket_indices(partitions: list) -> dict[tuple, list[int]]:
    buckets: dict[tuple, list[int]] = {}
    for i, part in enumerate(partitions):
        key = (part.cls_in_source, part.source_patches.size, part.target_patches.size)
        buckets.setdefault(key, []).append(i)
    return buckets


def compute_batch_loss(
    state: TrainState,
    images: torch.Tensor,
    partitions: list,
    loss_config: LossConfig,
) -> torch.Tensor:
    """Mask, encode, predict, and reduce Eq-style weighted loss over one batch."""
    dtype = images.dtype
    flat_weights = torch.as_tensor(state.weight_matrix.flat(), dtype=dtype)
    total = images.new_zeros(())
    for (cls_in_source, _, _), members in sorted(_bucket_indices(partitions).items()):
        sub = images[members]
        src_idx = torch.as_tensor(
            np.stack([partitions[i].source_patches for i in members]), dtype=torch.long
        )
        tgt_idx = torch.as_tensor(
            np.stack([partitions[i].target_patches for i in members]), dtype=torch.long
        )
        with torch.no_grad():
            if state.config.target_full_context:
                # teacher sees the whole image; reference rows are selected
                # at the target positions afterwards
                cls_ref, patch_ref = state.teacher.full_forward(sub)
                gathered = torch.gather(
                    patch_ref, 1, tgt_idx.unsqueeze(-1).expand(-1, -1, patch_ref.shape[-1])
                )
                if cls_in_source:
                    reference = gathered
                else:
                    reference = torch.cat([cls_ref.unsqueeze(1), gathered], dim=1)
            else:
                reference = state.teacher(sub, tgt_idx, include_cls=not cls_in_source)
        latents = state.encoder(sub, src_idx, include_cls=cls_in_source)
        predicted = state.predictor(latents, tgt_idx, predict_cls=not cls_in_source)
        weights = flat_weights[tgt_idx]
        if not cls_in_source:
            cls_w = torch.full(
                (len(members), 1), state.weight_matrix.cls_weight, dtype=dtype
            )
            weights = torch.cat([cls_w, weights], dim=1)
        d = token_distance(predicted, reference, loss_config)
        per_sample = (weights * d).sum(dim=-1) / d.shape[-1]
        total = total + per_sample.sum()
    return total / images.shape[0]


def train_step(state: TrainState, images: torch.Tensor) -> dict[str, float]:
    """One optimization step over a normalized image batch.

    Returns step metrics; raises with a diagnostic dump on a non-finite loss.
    """
    config = state.config
    loss_config = LossConfig(distance=config.loss_distance, smooth_l1_beta=config.smooth_l1_beta)
    partitions = sample_batch_partitions(state, images.shape[0])
    loss = compute_batch_loss(state, images, partitions, loss_config)
    if not torch.isfinite(loss):
        first = partitions[0]
        raise RuntimeError(
            "non-finite loss at step "
            f"{state.step} (seed={config.seed}, batch={images.shape[0]}, "
            f"first mask source={first.mask.source[:8].tolist()}..., "
            f"cls_in_source={first.cls_in_source})"
        )

    lr = lr_at(state.step, state.total_steps, config.learning_rate,
               _resolved_warmup(config, state.total_steps))
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    squares = [
        (p.grad.detach() ** 2).sum() for p in state.trainable_parameters() if p.grad is not None
    ]
    grad_norm = torch.sqrt(torch.stack(squares).sum()) if squares else loss.new_zeros(())
    state.optimizer.step()
    momentum = momentum_at(state.step, state.total_steps,
                           config.ema_momentum_start, config.ema_momentum_end)
    ema_update(state.teacher, state.encoder, momentum)
    state.step += 1
    return {
        "loss": float(loss.item()),
        "grad_norm": float(grad_norm.item()),
        "momentum": momentum,
        "lr": lr,
    }


# ---- checkpointing ---------------------------------------------------------


def _module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def state_to_checkpoint(state: TrainState, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    arrays.update(_module_arrays("enc_s", state.encoder))
    arrays.update(_module_arrays("enc_t", state.teacher))
    arrays.update(_module_arrays("pred", state.predictor))
    opt_state = state.optimizer.state
    for i, param in enumerate(state.trainable_parameters()):
        entry = opt_state.get(param)
        if not entry:
            continue
        arrays[f"opt.{i}.exp_avg"] = entry["exp_avg"].detach().cpu().numpy()
        arrays[f"opt.{i}.exp_avg_sq"] = entry["exp_avg_sq"].detach().cpu().numpy()
        arrays[f"opt.{i}.step"] = np.asarray(entry["step"])
    meta = {
        "kind": "train_state",
        "config": {k: ("auto" if v is None else v) for k, v in vars(state.config).items()},
        "rng": state.rng.bit_generator.state,
        "step": state.step,
        "epoch": state.epoch,
        "total_steps": state.total_steps,
    }
    ckpt.write_checkpoint(path, arrays, meta)


def _load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state_dict = {}
    for key, tensor in module.state_dict().items():
        arr = arrays[f"{prefix}.{key}"]
        state_dict[key] = torch.as_tensor(arr, dtype=tensor.dtype)
    module.load_state_dict(state_dict)


def load_train_state(path: str | Path, dtype: torch.dtype = torch.float32) -> TrainState:
    arrays, meta = ckpt.read_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ckpt.CheckpointError(f"{path} is not a training checkpoint")
    config = TrainConfig.from_mapping(
        {k: "auto" if v == "auto" else v for k, v in meta["config"].items()}
    )
    state = init_train_state(config, num_images=1, dtype=dtype)
    _load_module("enc_s", state.encoder, arrays)
    _load_module("enc_t", state.teacher, arrays)
    _load_module("pred", state.predictor, arrays)
    for i, param in enumerate(state.trainable_parameters()):
        key = f"opt.{i}.exp_avg"
        if key not in arrays:
            continue
        state.optimizer.state[param] = {
            "step": torch.as_tensor(arrays[f"opt.{i}.step"], dtype=torch.float32),
            "exp_avg": torch.as_tensor(arrays[key], dtype=param.dtype),
            "exp_avg_sq": torch.as_tensor(arrays[f"opt.{i}.exp_avg_sq"], dtype=param.dtype),
        }
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state.rng = rng
    state.step = int(meta["step"])
    state.epoch = int(meta["epoch"])
    state.total_steps = int(meta["total_steps"])
    return state


# ---- training loop ---------------------------------------------------------


def _append_metrics(path: Path, rows: Iterable[dict]) -> None:
    new_file = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS, extrasaction="ignore")
        if new_file:
            writer.writeheader()
        for row in rows:
            writer.writerow(row)


def train_loop(
    config: TrainConfig,
    images: np.ndarray,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
    stop_after: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run (or resume) epochs over uint8 images, checkpointing per epoch.

    Writes ``ckpt_epoch_NNN.mefe`` after each completed epoch (and one for
    the initial state when ``epochs`` is 0) plus an append-only
    ``metrics.csv``.  ``stop_after`` interrupts the run after that many total
    epochs while keeping the full-run schedules, leaving a checkpoint a later
    call can resume from.  Returns the final state and the step metrics
    recorded by this call.
    """
    if images.ndim != 4 or images.dtype != np.uint8:
        raise ValueError(f"expected uint8 [N, S, S, 3] images, got {images.dtype} {images.shape}")
    if images.shape[0] == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state = load_train_state(resume_from, dtype=dtype)
        if vars(state.config) != vars(config):
            raise ValueError("resume config does not match checkpoint config")
    else:
        state = init_train_state(config, num_images=images.shape[0], dtype=dtype)
    steps_per_epoch = max(1, math.ceil(images.shape[0] / config.batch_size))
    state.total_steps = max(1, config.epochs * steps_per_epoch)

    metrics: list[dict] = []
    if config.epochs == 0 and resume_from is None:
        state_to_checkpoint(state, out_dir / "ckpt_epoch_000.mefe")
        return state, metrics

    last_epoch = config.epochs if stop_after is None else min(stop_after, config.epochs)
    for epoch in range(state.epoch, last_epoch):
        order = state.rng.permutation(images.shape[0])
        epoch_rows: list[dict] = []
        for start in range(0, images.shape[0], config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            batch = torch.as_tensor(normalize_images(images[batch_idx]), dtype=dtype)
            t0 = time.perf_counter()
            try:
                step_metrics = train_step(state, batch)
            except RuntimeError as err:
                raise RuntimeError(f"{err} (epoch={epoch}, data indices={batch_idx[:8].tolist()})") from err
            step_metrics["wall_ms"] = (time.perf_counter() - t0) * 1e3
            step_metrics["step"] = state.step
            epoch_rows.append(step_metrics)
        state.epoch = epoch + 1
        if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            state_to_checkpoint(state, out_dir / f"ckpt_epoch_{epoch + 1:03d}.mefe")
        _append_metrics(out_dir / "metrics.csv", epoch_rows)
        metrics.extend(epoch_rows)
    if state.epoch == config.epochs or stop_after is not None:
        final = out_dir / f"ckpt_epoch_{state.epoch:03d}.mefe"
        if not final.exists():
            state_to_checkpoint(state, final)
    return state, metrics


# ---- collapse monitoring ----------------------------------------------------


@dataclass(frozen=True)
class RepresentationStats:
    cls_mean: np.ndarray
    cls_std: np.ndarray
    patch_mean: np.ndarray
    patch_std: np.ndarray

    @property
    def collapse_indicator(self) -> float:
        """Mean per-dimension std; zero iff the embeddings are constant."""
        return float(np.concatenate([self.cls_std, self.patch_std]).mean())


@torch.no_grad()
def representation_stats(
    encoder: Encoder,
    images: np.ndarray,
    n: int | None = None,
    batch_size: int = 64,
) -> RepresentationStats:
    """Per-dimension mean/std of CLS and mean-pooled patch embeddings."""
    n = images.shape[0] if n is None else min(n, images.shape[0])
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    cls_parts, patch_parts = [], []
    for start in range(0, n, batch_size):
        batch = torch.as_tensor(normalize_images(images[start : min(start + batch_size, n)]))
        cls_lat, patch_lat = encoder.full_forward(batch)
        cls_parts.append(cls_lat.numpy())
        patch_parts.append(patch_lat.mean(dim=1).numpy())
    cls_all = np.concatenate(cls_parts)
    patch_all = np.concatenate(patch_parts)
    return RepresentationStats(
        cls_mean=cls_all.mean(axis=0),
        cls_std=cls_all.std(axis=0),
        patch_mean=patch_all.mean(axis=0),
        patch_std=patch_all.std(axis=0),
    )
