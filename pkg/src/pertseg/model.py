"""Full pipeline: perturbation modules -> cost volume -> aggregation -> decoding.

Encoders stay outside the module (frozen features come in as plain tensors),
so encoder outputs never carry gradients.  In eval mode the perturbation
modules are exact identities and the forward pass is bit-identical to a model
built without them.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .costvol import AggregatorConfig, CostAggregator, CostDecoder, CostEmbedding, build_cost_volume
from .perturb import ImagePerturbation, NoiseSpec, TextPerturbation
from .rng import substream


class SegmentationModel(nn.Module):
    """Open-vocabulary segmentation head over frozen text/image features.

    All learnable weights are shared across the class axis, so the same
    checkpoint evaluates any class list.  Parameter initialization draws from
    named substreams of ``seed`` only; torch's global RNG is never touched.
    """

    def __init__(
        self,
        embed_dim: int,
        feature_dim: int = 64,
        num_blocks: int = 2,
        window: int = 5,
        text_init_scale: float = 0.02,
        reduction_ratio: int = 2,
        use_text_perturb: bool = True,
        use_image_perturb: bool = True,
        text_noise: NoiseSpec = NoiseSpec(),
        image_noise: NoiseSpec = NoiseSpec(),
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ) -> None:
        super().__init__()
        self.embed_dim = embed_dim
        self.dtype_ = dtype

        def rngs(name: str):
            return substream(seed, "init", name)

        self.text_perturb = (
            TextPerturbation(embed_dim, text_init_scale, text_noise, rng=rngs("text_perturb"), dtype=dtype)
            if use_text_perturb
            else None
        )
        self.image_perturb = (
            ImagePerturbation(embed_dim, reduction_ratio, image_noise, rng=rngs("image_perturb"), dtype=dtype)
            if use_image_perturb
            else None
        )
        self.agg_config = AggregatorConfig(num_blocks=num_blocks, feature_dim=feature_dim, window=window)
        self.embed = CostEmbedding(feature_dim, rng=rngs("embed"), dtype=dtype)
        self.aggregator = CostAggregator(self.agg_config, seed_rngs=rngs, dtype=dtype)
        self.decoder = CostDecoder(feature_dim, rng=rngs("decoder"), dtype=dtype)

    def _check_pairing(self, visual: torch.Tensor, text: torch.Tensor) -> None:
        if visual.shape[-1] != self.embed_dim or text.shape[-1] != self.embed_dim:
            raise ValueError(
                f"embed dim mismatch: model {self.embed_dim}, visual {visual.shape[-1]}, text {text.shape[-1]}"
            )

    def perturbed_embeddings(
        self,
        visual: torch.Tensor,
        text: torch.Tensor,
        *,
        rng: np.random.Generator | None = None,
        noise: tuple[torch.Tensor | None, torch.Tensor | None] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Apply the perturbation modules per the current train/eval mode.

        visual: (B, H', W', C); text: (N, C).  In train mode, noise comes from
        ``rng`` (text draw first, then image draw) unless fixed draws are
        passed via ``noise``.
        """
        self._check_pairing(visual, text)
        b, gh, gw, c = visual.shape
        flat = visual.reshape(b, gh * gw, c)
        z_txt, z_vis = noise if noise is not None else (None, None)

        t_hat = text
        if self.text_perturb is not None and self.training:
            if z_txt is None:
                if rng is None:
                    raise ValueError("train-mode forward needs an rng or fixed noise draws")
                z_txt = self.text_perturb.draw(b, rng)
            t_hat = self.text_perturb(text, z_txt)
        elif self.text_perturb is not None:
            t_hat = self.text_perturb(text)

        v_hat = flat
        if self.image_perturb is not None and self.training:
            if z_vis is None:
                if rng is None:
                    raise ValueError("train-mode forward needs an rng or fixed noise draws")
                z_vis = self.image_perturb.draw(b, gh * gw, rng)
            v_hat = self.image_perturb(flat, t_hat, z_vis)
        elif self.image_perturb is not None:
            v_hat = self.image_perturb(flat, t_hat)

        return v_hat, t_hat

    def raw_cost(
        self,
        visual: torch.Tensor,
        text: torch.Tensor,
        *,
        rng: np.random.Generator | None = None,
        noise=None,
    ) -> torch.Tensor:
        """Cost volume before aggregation, shaped (B, H', W', N)."""
        b, gh, gw, _ = visual.shape
        v_hat, t_hat = self.perturbed_embeddings(visual, text, rng=rng, noise=noise)
        cost = build_cost_volume(v_hat, t_hat)
        return cost.reshape(b, gh, gw, -1)

    def forward(
        self,
        visual: torch.Tensor,
        text: torch.Tensor,
        target_size: tuple[int, int],
        *,
        rng: np.random.Generator | None = None,
        noise=None,
    ) -> torch.Tensor:
        """Logits of shape (B, H, W, N) at the requested output size."""
        cost = self.raw_cost(visual, text, rng=rng, noise=noise)
        feats = self.embed(cost)
        feats = self.aggregator(feats)
        return self.decoder(feats, target_size)

    def trainable_parameter_names(self) -> list[str]:
        return [name for name, p in self.named_parameters() if p.requires_grad]
