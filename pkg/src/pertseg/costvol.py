"""Pixel-text cost volume: construction, aggregation, decoding.

Every learnable stage shares weights across the class axis (and the class
mixer carries no positional encoding), so the whole path is equivariant under
permutations of the class list -- required for an open vocabulary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .perturb import _init_linear

COSINE_EPS = 1e-8


@dataclass(frozen=True)
class AggregatorConfig:
    num_blocks: int = 2
    feature_dim: int = 64
    window: int = 5

    def __post_init__(self) -> None:
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be a positive odd integer, got {self.window}")


@dataclass
class Logits:
    """(H, W, N) logits with the class order they were computed under."""

    tensor: np.ndarray
    class_names: tuple[str, ...]


def build_cost_volume(visual: torch.Tensor, text: torch.Tensor, eps: float = COSINE_EPS) -> torch.Tensor:
    """Dense cosine similarity between every visual position and every class row.

    visual: (B, P, C); text: (N, C) or (B, N, C). Returns (B, P, N).
    Zero-norm vectors are guarded by ``eps`` instead of producing NaN.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if visual.shape[-1] != text.shape[-1]:
        raise ValueError(
            f"embed dim mismatch: visual {visual.shape[-1]} vs text {text.shape[-1]}"
        )
    vn = visual / visual.norm(dim=-1, keepdim=True).clamp_min(eps)
    tn = text / text.norm(dim=-1, keepdim=True).clamp_min(eps)
    if tn.dim() == 2:
        return torch.einsum("bpc,nc->bpn", vn, tn)
    return torch.einsum("bpc,bnc->bpn", vn, tn)


class CostEmbedding(nn.Module):
    """Shared affine map from each scalar cost to feature_dim channels."""

    def __init__(self, feature_dim: int, *, rng: np.random.Generator, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.proj = nn.Linear(1, feature_dim)
        _init_linear(self.proj, rng, 1.0, dtype)

    def forward(self, cost: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(cost).all():
            raise ValueError("cost volume contains NaN/Inf")
        return self.proj(cost.unsqueeze(-1))


_DENSE_ATTN_MAX_POSITIONS = 2048
_window_mask_cache: dict[tuple, torch.Tensor] = {}


def _window_mask(h: int, w: int, window: int, dtype: torch.dtype) -> torch.Tensor:
    """(P, P) additive mask: 0 inside each position's window, -inf outside."""
    key = (h, w, window, dtype)
    cached = _window_mask_cache.get(key)
    if cached is None:
        rows = torch.arange(h).repeat_interleave(w)
        cols = torch.arange(w).repeat(h)
        reach = window // 2
        local = (rows[:, None] - rows[None, :]).abs() <= reach
        local &= (cols[:, None] - cols[None, :]).abs() <= reach
        cached = torch.where(local, 0.0, float("-inf")).to(dtype)
        _window_mask_cache[key] = cached
    return cached


class SpatialMixer(nn.Module):
    """Residual local-window self-attention over positions, one class at a time
    (weights shared across classes).

    Small grids run as dense attention with an additive window mask (BLAS
    matmuls); large grids fall back to gathering each position's neighborhood
    explicitly, which caps memory at P * window^2 instead of P^2.
    """

    def __init__(self, dim: int, window: int, *, rng: np.random.Generator, dtype: torch.dtype) -> None:
        super().__init__()
        self.dim = dim
        self.window = window
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)
        std = 1.0 / math.sqrt(dim)
        _init_linear(self.to_qkv, rng, std, dtype)
        _init_linear(self.out, rng, std, dtype)
        self.norm.to(dtype)

    def forward(self, x: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
        # x: (B*N, P, D) with P = H*W
        h, w = grid
        if self.window > h or self.window > w:
            raise ValueError(f"window {self.window} larger than spatial extent {h}x{w}")
        q, k, v = self.to_qkv(self.norm(x)).chunk(3, dim=-1)
        if h * w <= _DENSE_ATTN_MAX_POSITIONS:
            mask = _window_mask(h, w, self.window, x.dtype).to(x.device)
            scores = q @ k.transpose(1, 2) / math.sqrt(self.dim) + mask
            ctx = scores.softmax(dim=-1) @ v
        else:
            ctx = self._gathered_attention(q, k, v, h, w)
        return x + self.out(ctx)

    def _gathered_attention(
        self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, h: int, w: int
    ) -> torch.Tensor:
        bn, p, d = q.shape
        win2 = self.window * self.window
        pad = self.window // 2
        k_nb = F.unfold(k.transpose(1, 2).reshape(bn, d, h, w), self.window, padding=pad)
        v_nb = F.unfold(v.transpose(1, 2).reshape(bn, d, h, w), self.window, padding=pad)
        k_nb = k_nb.reshape(bn, d, win2, p).permute(0, 3, 2, 1)  # (B*N, P, win2, D)
        v_nb = v_nb.reshape(bn, d, win2, p).permute(0, 3, 2, 1)
        valid = F.unfold(
            torch.ones(1, 1, h, w, dtype=q.dtype, device=q.device), self.window, padding=pad
        ).reshape(1, win2, p).permute(0, 2, 1) > 0.5  # (1, P, win2)
        attn = torch.matmul(k_nb, q.unsqueeze(-1)).squeeze(-1) / math.sqrt(d)
        attn = attn.masked_fill(~valid, float("-inf")).softmax(dim=-1)
        return torch.matmul(attn.unsqueeze(2), v_nb).squeeze(2)


class ClassMixer(nn.Module):
    """Residual self-attention over the class slots at each position; no
    positional encoding on the class axis, weights shared across positions."""

    def __init__(self, dim: int, *, rng: np.random.Generator, dtype: torch.dtype) -> None:
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(dim)
        self.to_qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim)
        std = 1.0 / math.sqrt(dim)
        _init_linear(self.to_qkv, rng, std, dtype)
        _init_linear(self.out, rng, std, dtype)
        self.norm.to(dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B*P, N, D)
        q, k, v = self.to_qkv(self.norm(x)).chunk(3, dim=-1)
        attn = (q @ k.transpose(-1, -2)) / math.sqrt(self.dim)
        ctx = attn.softmax(dim=-1) @ v
        return x + self.out(ctx)


class CostAggregator(nn.Module):
    """Alternating spatial / class aggregation blocks over the embedded cost
    volume; every sub-step is residual."""

    def __init__(self, config: AggregatorConfig, *, seed_rngs, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.config = config
        self.spatial = nn.ModuleList()
        self.classwise = nn.ModuleList()
        for i in range(config.num_blocks):
            self.spatial.append(
                SpatialMixer(config.feature_dim, config.window, rng=seed_rngs(f"agg.block{i}.spatial"), dtype=dtype)
            )
            self.classwise.append(
                ClassMixer(config.feature_dim, rng=seed_rngs(f"agg.block{i}.class"), dtype=dtype)
            )

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        # feats: (B, H, W, N, D)
        b, h, w, n, d = feats.shape
        x = feats
        for spatial, classwise in zip(self.spatial, self.classwise):
            y = x.permute(0, 3, 1, 2, 4).reshape(b * n, h * w, d)
            y = spatial(y, (h, w))
            x = y.reshape(b, n, h, w, d).permute(0, 2, 3, 1, 4)
            y = x.reshape(b * h * w, n, d)
            y = classwise(y)
            x = y.reshape(b, h, w, n, d)
        return x


class CostDecoder(nn.Module):
    """Upsampling decoder shared across classes.

    Repeats (2x bilinear upsample + depthwise 3x3 + pointwise conv + GELU)
    while the grid is more than 2x away from the target, then resizes exactly
    and applies a shared linear head mapping feature_dim -> 1 logit per class.
    The refine block is reused across stages, so the weight set is independent
    of the target size; replicate padding keeps constant inputs constant.
    """

    def __init__(self, feature_dim: int, *, rng: np.random.Generator, dtype: torch.dtype = torch.float32) -> None:
        super().__init__()
        self.local = nn.Conv2d(feature_dim, feature_dim, 3, padding=1, groups=feature_dim, padding_mode="replicate")
        local_w = rng.standard_normal(tuple(self.local.weight.shape)) / 3.0
        self.local.weight = nn.Parameter(torch.from_numpy(local_w).to(dtype))
        self.local.bias = nn.Parameter(torch.zeros(self.local.bias.shape, dtype=dtype))
        self.mix = nn.Conv2d(feature_dim, feature_dim, 1)
        mix_w = rng.standard_normal(tuple(self.mix.weight.shape)) / math.sqrt(feature_dim)
        self.mix.weight = nn.Parameter(torch.from_numpy(mix_w).to(dtype))
        self.mix.bias = nn.Parameter(torch.zeros(self.mix.bias.shape, dtype=dtype))
        self.head = nn.Linear(feature_dim, 1)
        _init_linear(self.head, rng, 1.0 / math.sqrt(feature_dim), dtype)

    def forward(self, feats: torch.Tensor, target_size: tuple[int, int]) -> torch.Tensor:
        # feats: (B, H', W', N, D) -> logits (B, H, W, N)
        b, gh, gw, n, d = feats.shape
        th, tw = int(target_size[0]), int(target_size[1])
        if th < gh or tw < gw:
            raise ValueError(f"target size {th}x{tw} smaller than feature grid {gh}x{gw}")
        x = feats.permute(0, 3, 4, 1, 2).reshape(b * n, d, gh, gw)
        while max(th / x.shape[-2], tw / x.shape[-1]) > 2:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.gelu(self.mix(self.local(x)))
        if x.shape[-2:] != (th, tw):
            x = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
        x = x.reshape(b, n, d, th, tw).permute(0, 3, 4, 1, 2)  # (B, H, W, N, D)
        return self.head(x).squeeze(-1)


def predict_labels(logits: np.ndarray | torch.Tensor) -> np.ndarray:
    """Per-pixel argmax over the class axis; ties go to the lowest index."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    if logits.shape[-1] < 1:
        raise ValueError("need at least one class")
    return np.argmax(logits, axis=-1).astype(np.uint8)
