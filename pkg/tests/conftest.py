from pathlib import Path

import numpy as np
import pytest
import torch

from pertseg.data import SynthSpec, generate_synthetic_dataset
from pertseg.model import SegmentationModel
from pertseg.rng import substream


def tiny_model(seed=0, embed_dim=8, feature_dim=8, num_blocks=1, window=3, dtype=torch.float64, **kwargs):
    return SegmentationModel(
        embed_dim=embed_dim,
        feature_dim=feature_dim,
        num_blocks=num_blocks,
        window=window,
        seed=seed,
        dtype=dtype,
        **kwargs,
    )


def random_inputs(seed, batch=1, grid=(4, 4), num_classes=3, embed_dim=8, dtype=torch.float64):
    rng = substream(seed, "inputs")
    visual = torch.from_numpy(rng.standard_normal((batch, *grid, embed_dim))).to(dtype)
    text = torch.from_numpy(rng.standard_normal((num_classes, embed_dim))).to(dtype)
    return visual, text


@pytest.fixture(scope="session")
def synth_dataset(tmp_path_factory) -> dict[str, Path]:
    """A small mixed-shape dataset reused across tests."""
    out = tmp_path_factory.mktemp("synth")
    spec = SynthSpec(num_images=6, size=32, num_classes=3, shapes_per_image=(1, 2))
    return generate_synthetic_dataset(spec, out, seed=11)


@pytest.fixture(scope="session")
def holdout_dataset(tmp_path_factory) -> dict[str, Path]:
    out = tmp_path_factory.mktemp("synth_holdout")
    spec = SynthSpec(
        num_images=6, size=32, num_classes=5, shapes_per_image=(1, 2), holdout_classes=2, test_images=4
    )
    return generate_synthetic_dataset(spec, out, seed=3)


def central_difference_grad(compute, param: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Numerical gradient of scalar-valued ``compute`` w.r.t. each entry of
    ``param`` (mutated in place and restored)."""
    grad = torch.zeros_like(param)
    flat = param.detach().reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        plus = compute()
        flat[i] = orig - h
        minus = compute()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def brute_force_cosine(v: np.ndarray, t: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Independent double-loop cosine oracle over an (H, W, C) map and (N, C) rows."""
    h, w, _ = v.shape
    n = t.shape[0]
    out = np.zeros((h, w, n))
    for i in range(h):
        for j in range(w):
            for c in range(n):
                vi = v[i, j]
                tc = t[c]
                denom = max(np.sqrt((vi * vi).sum()), eps) * max(np.sqrt((tc * tc).sum()), eps)
                out[i, j, c] = float((vi * tc).sum()) / denom
    return out
