"""Compact ViT encoder, the latent predictor, and the EMA teacher update.

The encoder patchifies only the requested token subset and attaches each
token's original-position embedding, so partial views (source or target
sets) are first-class.  The predictor consumes projected source latents plus
one learnable mask token per requested target position (and an optional CLS
query) and emits predictions in encoder width.  The teacher encoder is never
updated by gradients, only by ``ema_update``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import GridSpec

LEARNED = "learned"
SINUSOIDAL = "sinusoidal"

# Standardized inputs live well inside this band; raw byte or [0, 1] pixel
# grids that skipped standardization do not reach its edges either, so the
# check mainly guards against un-divided [0, 255] data and non-finite values.
INPUT_RANGE = 8.0


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 192
    depth: int = 6
    num_heads: int = 3
    mlp_ratio: float = 4.0
    grid: GridSpec = field(default_factory=GridSpec)
    use_cls: bool = True
    pos_embedding: str = LEARNED

    def __post_init__(self) -> None:
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.pos_embedding not in (LEARNED, SINUSOIDAL):
            raise ValueError(f"unknown pos_embedding {self.pos_embedding!r}")


@dataclass(frozen=True)
class PredictorConfig:
    depth: int = 4
    embed_dim: int | None = None  # defaults to encoder width // 2
    num_heads: int | None = None  # defaults to encoder heads

    def resolve(self, encoder: EncoderConfig) -> tuple[int, int]:
        dim = self.embed_dim if self.embed_dim is not None else encoder.embed_dim // 2
        heads = self.num_heads if self.num_heads is not None else encoder.num_heads
        if dim > encoder.embed_dim:
            raise ValueError(f"predictor width {dim} exceeds encoder width {encoder.embed_dim}")
        if dim % heads != 0:
            raise ValueError(f"predictor width {dim} not divisible by num_heads {heads}")
        return dim, heads


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, T, self.num_heads, -1).transpose(1, 2)
        k = k.view(B, T, self.num_heads, -1).transpose(1, 2)
        v = v.view(B, T, self.num_heads, -1).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, T, D))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def sinusoidal_table(num_rows: int, dim: int) -> torch.Tensor:
    position = torch.arange(num_rows, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(num_rows, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: dim // 2])
    return table.to(torch.float32)


def _check_images(images: torch.Tensor, grid: GridSpec) -> None:
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images of shape [B, 3, S, S], got {tuple(images.shape)}")
    size = grid.image_size
    if images.shape[2] != size or images.shape[3] != size:
        raise ValueError(f"image size {tuple(images.shape[2:])} does not match grid ({size})")
    if not torch.isfinite(images).all():
        raise ValueError("images contain non-finite values")
    peak = images.abs().max().item()
    if peak > INPUT_RANGE:
        raise ValueError(
            f"images look un-normalized (|value| up to {peak:.1f}); "
            "standardize pixels before encoding"
        )


class Encoder(nn.Module):
    """Transformer over an arbitrary subset of grid patches plus optional CLS."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        grid = config.grid
        dim = config.embed_dim
        patch_dim = 3 * grid.patch_size**2
        self.patch_proj = nn.Linear(patch_dim, dim)
        self.cls_token = nn.Parameter(torch.zeros(dim))
        # Row 0 is the CLS position; rows 1..N follow row-major patch order.
        if config.pos_embedding == LEARNED:
            self.pos_embed = nn.Parameter(torch.zeros(grid.num_patches + 1, dim))
        else:
            self.register_buffer("pos_embed", sinusoidal_table(grid.num_patches + 1, dim))
        self.blocks = nn.ModuleList(
            Block(dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        if config.pos_embedding == LEARNED:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """[B, 3, S, S] -> [B, N, 3 * p * p] in row-major patch order."""
        B = images.shape[0]
        L, p = self.config.grid.patches_per_axis, self.config.grid.patch_size
        x = images.reshape(B, 3, L, p, L, p)
        x = x.permute(0, 2, 4, 1, 3, 5)
        return x.reshape(B, L * L, 3 * p * p)

    def forward(
        self,
        images: torch.Tensor,
        token_indices: torch.Tensor | None = None,
        include_cls: bool = True,
    ) -> torch.Tensor:
        """Encode the listed patches (all of them when ``token_indices`` is None).

        Returns one latent per token, CLS first when present; patch outputs
        follow the order of ``token_indices``.
        """
        grid = self.config.grid
        _check_images(images, grid)
        B = images.shape[0]
        if token_indices is None:
            token_indices = torch.arange(grid.num_patches, device=images.device)
        idx = torch.as_tensor(token_indices, dtype=torch.long, device=images.device)
        if idx.ndim == 1:
            idx = idx.unsqueeze(0).expand(B, -1)
        if idx.shape[0] != B:
            raise ValueError(f"token_indices batch {idx.shape[0]} does not match images {B}")
        if idx.numel() == 0 and not include_cls:
            raise ValueError("need at least one patch index or include_cls=True")
        if idx.numel() > 0 and (idx.min() < 0 or idx.max() >= grid.num_patches):
            raise ValueError(f"patch indices out of range [0, {grid.num_patches})")

        patches = self.patchify(images)
        patch_dim = patches.shape[-1]
        tok = torch.gather(patches, 1, idx.unsqueeze(-1).expand(-1, -1, patch_dim))
        x = self.patch_proj(tok) + self.pos_embed[idx + 1]
        if include_cls:
            cls = (self.cls_token + self.pos_embed[0]).expand(B, 1, -1)
            x = torch.cat([cls, x], dim=1)
        for block in self.blocks:
            x = block(x)
        return self.norm(x)

    def full_forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode the whole grid with CLS; returns (cls [B, D], patches [B, N, D])."""
        out = self.forward(images, token_indices=None, include_cls=True)
        return out[:, 0], out[:, 1:]


class Predictor(nn.Module):
    """Shallow transformer mapping source latents to predicted target latents."""

    def __init__(self, encoder_config: EncoderConfig, config: PredictorConfig):
        super().__init__()
        dim, heads = config.resolve(encoder_config)
        enc_dim = encoder_config.embed_dim
        self.dim = dim
        self.input_proj = nn.Linear(enc_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.cls_query = nn.Parameter(torch.zeros(dim))
        self.pos_embed = nn.Parameter(torch.zeros(encoder_config.grid.num_patches, dim))
        self.blocks = nn.ModuleList(
            Block(dim, heads, encoder_config.mlp_ratio) for _ in range(config.depth)
        )
        self.norm = nn.LayerNorm(dim)
        self.output_proj = nn.Linear(dim, enc_dim)
        self.apply(_init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.cls_query, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(
        self,
        source_latents: torch.Tensor,
        target_positions: torch.Tensor | None,
        predict_cls: bool = False,
    ) -> torch.Tensor:
        """Predict latents at ``target_positions`` (plus CLS first when requested)."""
        if source_latents.ndim != 3:
            raise ValueError(f"expected [B, S, D] source latents, got {tuple(source_latents.shape)}")
        B = source_latents.shape[0]
        if source_latents.shape[-1] != self.input_proj.in_features:
            raise ValueError(
                f"source latent width {source_latents.shape[-1]} does not match "
                f"predictor input width {self.input_proj.in_features}"
            )
        if target_positions is None:
            idx = torch.zeros((B, 0), dtype=torch.long, device=source_latents.device)
        else:
            idx = torch.as_tensor(target_positions, dtype=torch.long, device=source_latents.device)
            if idx.ndim == 1:
                idx = idx.unsqueeze(0).expand(B, -1)
        if idx.numel() == 0 and not predict_cls:
            raise ValueError("need at least one target position or predict_cls=True")
        if idx.numel() > 0 and (idx.min() < 0 or idx.max() >= self.pos_embed.shape[0]):
            raise ValueError(f"target positions out of range [0, {self.pos_embed.shape[0]})")

        ctx = self.input_proj(source_latents)
        queries = self.mask_token + self.pos_embed[idx]
        if predict_cls:
            cls_q = self.cls_query.expand(B, 1, -1)
            queries = torch.cat([cls_q, queries], dim=1)
        x = torch.cat([ctx, queries], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return self.output_proj(x[:, ctx.shape[1] :])


def build_models(
    encoder_config: EncoderConfig,
    predictor_config: PredictorConfig,
    seed: int,
    dtype: torch.dtype = torch.float32,
) -> tuple[Encoder, Encoder, Predictor]:
    """Seeded construction of (source encoder, EMA teacher, predictor).

    The teacher starts as an exact copy of the source encoder and has
    gradients disabled everywhere.
    """
    torch.manual_seed(seed)
    encoder = Encoder(encoder_config).to(dtype)
    predictor = Predictor(encoder_config, predictor_config).to(dtype)
    teacher = copy.deepcopy(encoder)
    teacher.requires_grad_(False)
    return encoder, teacher, predictor


@torch.no_grad()
def ema_update(target: nn.Module, source: nn.Module, momentum: float) -> None:
    """theta_T <- m * theta_T + (1 - m) * theta_S, elementwise over parameters."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    target_params = dict(target.named_parameters())
    source_params = dict(source.named_parameters())
    if target_params.keys() != source_params.keys():
        raise ValueError("target and source parameter sets differ")
    for name, t in target_params.items():
        s = source_params[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        # staged (non-fused) arithmetic so the update equals the literal
        # formula m*t + (1-m)*s with per-term rounding, reproducible outside
        t.copy_(momentum * t + (1.0 - momentum) * s)
