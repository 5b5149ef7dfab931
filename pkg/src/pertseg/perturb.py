"""Learnable perturbation modules for the text and image branches.

Both modules are train-time-only stochastic residuals built on the
reparameterization trick: the noise draw is a constant, gradients flow through
the learnable location/scale.  In eval mode both are exact identity maps, so
an inference pass costs the same as a pipeline without them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

FAMILIES = ("gaussian", "laplace", "uniform", "student_t")


@dataclass(frozen=True)
class NoiseSpec:
    """Stochastic source description.

    ``standardized`` rescales every family to population mean 0 / variance 1
    (Student-t by sqrt((df-2)/df)); with it off, the family's unit-scale form
    is used: N(0,1), Laplace(0,1), U(-1,1), t(df).  ``df`` applies to
    student_t only and is ignored by the other families.
    """

    family: str = "gaussian"
    df: float | None = None
    standardized: bool = True

    def __post_init__(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}; choose from {FAMILIES}")
        if self.family == "student_t":
            if self.df is None:
                raise ValueError("student_t requires df")
            if self.standardized and not self.df > 2:
                raise ValueError(f"standardized student_t requires df > 2, got {self.df}")
            if not self.df > 0:
                raise ValueError(f"student_t requires df > 0, got {self.df}")

    def to_config(self) -> dict:
        return {"family": self.family, "df": self.df, "standardized": self.standardized}

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSpec":
        return cls(
            family=cfg["family"],
            df=cfg.get("df"),
            standardized=bool(cfg.get("standardized", True)),
        )


def sample_noise(
    spec: NoiseSpec,
    shape: tuple[int, ...],
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Draw i.i.d. noise of the given family. The rng is explicit: there is no
    ambient randomness anywhere in the package."""
    if rng is None:
        raise ValueError("an explicit numpy Generator is required")
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ValueError("shape must be non-empty")
    if spec.family == "gaussian":
        draws = rng.standard_normal(shape)
    elif spec.family == "laplace":
        scale = 1.0 / math.sqrt(2.0) if spec.standardized else 1.0
        draws = rng.laplace(0.0, scale, shape)
    elif spec.family == "uniform":
        half = math.sqrt(3.0) if spec.standardized else 1.0
        draws = rng.uniform(-half, half, shape)
    else:  # student_t
        draws = rng.standard_t(spec.df, shape)
        if spec.standardized:
            draws = draws * math.sqrt((spec.df - 2.0) / spec.df)
    return torch.from_numpy(np.ascontiguousarray(draws)).to(dtype)


def _init_linear(layer: nn.Linear, rng: np.random.Generator, std: float, dtype: torch.dtype) -> None:
    weight = rng.standard_normal(tuple(layer.weight.shape)) * std
    layer.weight = nn.Parameter(torch.from_numpy(weight).to(dtype))
    if layer.bias is not None:
        layer.bias = nn.Parameter(torch.zeros(layer.bias.shape, dtype=dtype))


class TextPerturbation(nn.Module):
    """Learnable residual on the class-prompt embeddings.

    T_hat = T + |sigma| * Z + mu with mu, sigma in R^C. One Z of shape C is
    drawn per sample and broadcast over all class rows. mu and sigma are
    initialized i.i.d. gaussian with standard deviation ``init_scale``.
    """

    def __init__(
        self,
        embed_dim: int,
        init_scale: float,
        noise: NoiseSpec = NoiseSpec(),
        *,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {embed_dim}")
        if init_scale < 0:
            raise ValueError(f"init_scale must be >= 0, got {init_scale}")
        self.embed_dim = embed_dim
        self.init_scale = float(init_scale)
        self.noise = noise
        self.mu = nn.Parameter(torch.from_numpy(rng.standard_normal(embed_dim) * init_scale).to(dtype))
        self.sigma = nn.Parameter(torch.from_numpy(rng.standard_normal(embed_dim) * init_scale).to(dtype))

    def draw(self, batch: int, rng: np.random.Generator) -> torch.Tensor:
        return sample_noise(self.noise, (batch, self.embed_dim), rng, dtype=self.mu.dtype)

    def forward(self, text: torch.Tensor, z: torch.Tensor | None = None) -> torch.Tensor:
        """text: (N, C). In train mode, z: (B, C); returns (B, N, C).
        In eval mode returns the input untouched."""
        if not self.training:
            return text
        if not torch.isfinite(self.mu).all() or not torch.isfinite(self.sigma).all():
            raise ValueError("text perturbation parameters contain NaN/Inf")
        if z is None:
            raise ValueError("train-mode forward needs a noise draw")
        if z.shape[-1] != self.embed_dim or text.shape[-1] != self.embed_dim:
            raise ValueError("embed dim mismatch in text perturbation")
        eps = self.sigma.abs() * z + self.mu  # (B, C)
        return text.unsqueeze(0) + eps.unsqueeze(1)


class ImagePerturbation(nn.Module):
    """Spatial perturbation on dense visual features, conditioned on text.

    The (possibly perturbed) text rows are mean-pooled into a single semantic
    cue; a single-head cross-attention with hidden width C//reduction_ratio
    scores each visual position against the cue and predicts per-position
    (mu, sigma).  With one cue slot a softmax would be degenerate, so the
    scaled dot-product score acts as a multiplicative gate, which keeps the
    perturbation position-dependent.  The output projection starts at exactly
    zero, so the module begins as an identity even in train mode.
    """

    def __init__(
        self,
        embed_dim: int,
        reduction_ratio: int,
        noise: NoiseSpec = NoiseSpec(),
        *,
        rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        if reduction_ratio < 1:
            raise ValueError(f"reduction_ratio must be >= 1, got {reduction_ratio}")
        hidden = embed_dim // reduction_ratio
        if hidden < 1:
            raise ValueError(
                f"reduction_ratio {reduction_ratio} exceeds embed_dim {embed_dim} (hidden dim would be 0)"
            )
        self.embed_dim = embed_dim
        self.hidden = hidden
        self.noise = noise
        self.to_q = nn.Linear(embed_dim, hidden, bias=False)
        self.to_k = nn.Linear(embed_dim, hidden, bias=False)
        self.to_v = nn.Linear(embed_dim, hidden, bias=False)
        self.out = nn.Linear(hidden, 2 * embed_dim)
        std = 1.0 / math.sqrt(embed_dim)
        for layer in (self.to_q, self.to_k, self.to_v):
            _init_linear(layer, rng, std, dtype)
        self.out.weight = nn.Parameter(torch.zeros(self.out.weight.shape, dtype=dtype))
        self.out.bias = nn.Parameter(torch.zeros(self.out.bias.shape, dtype=dtype))

    def draw(self, batch: int, positions: int, rng: np.random.Generator) -> torch.Tensor:
        return sample_noise(self.noise, (batch, positions, self.embed_dim), rng, dtype=self.out.weight.dtype)

    def location_scale(self, visual: torch.Tensor, text_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Predict per-position (mu, sigma_raw) from (B, P, C) features and
        (B, N, C) or (N, C) perturbed text rows."""
        cue = text_hat.mean(dim=-2)  # (B, C) or (C,)
        if cue.dim() == 1:
            cue = cue.unsqueeze(0).expand(visual.shape[0], -1)
        q = self.to_q(visual)  # (B, P, h)
        k = self.to_k(cue)  # (B, h)
        v = self.to_v(cue)  # (B, h)
        score = (q * k.unsqueeze(1)).sum(dim=-1, keepdim=True) / math.sqrt(self.hidden)  # (B, P, 1)
        gated = score * v.unsqueeze(1)  # (B, P, h)
        mu, sigma_raw = self.out(gated).chunk(2, dim=-1)
        return mu, sigma_raw

    def forward(
        self, visual: torch.Tensor, text_hat: torch.Tensor, z: torch.Tensor | None = None
    ) -> torch.Tensor:
        """visual: (B, P, C). Eval mode returns the input untouched."""
        if not self.training:
            return visual
        for p in self.parameters():
            if not torch.isfinite(p).all():
                raise ValueError("image perturbation parameters contain NaN/Inf")
        if z is None:
            raise ValueError("train-mode forward needs a noise draw")
        if visual.shape[-1] != self.embed_dim or text_hat.shape[-1] != self.embed_dim:
            raise ValueError("embed dim mismatch in image perturbation")
        mu, sigma_raw = self.location_scale(visual, text_hat)
        return visual + sigma_raw.abs() * z + mu
