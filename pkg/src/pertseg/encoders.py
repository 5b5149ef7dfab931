"""Text and image embedding sources behind a uniform interface.

The synthetic encoders are pure functions of (input, seed_namespace): prompt
strings and flat-colour image patches are hashed into RNG seeds and expanded
into unit-norm gaussian vectors.  They stand in for a frozen vision-language
model so the rest of the pipeline can be exercised offline.  ``EncoderAdapter``
documents the surface a real model plugs into (see docs/formats.md).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .rng import hash_to_seed

PLACEHOLDER = "{class}"


@dataclass(frozen=True)
class PromptSet:
    """Class names rendered through a single-placeholder template."""

    class_names: tuple[str, ...]
    template: str
    prompts: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.prompts)


@dataclass
class TextEmbedding:
    """N x C matrix of class-prompt embeddings, rows ordered like class_names."""

    matrix: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError(f"expected (N, C) matrix with N >= 1, got {self.matrix.shape}")
        if self.matrix.shape[0] != len(self.class_names):
            raise ValueError("row count does not match class_names")
        if not np.isfinite(self.matrix).all():
            raise ValueError("text embedding contains NaN/Inf")

    @property
    def embed_dim(self) -> int:
        return self.matrix.shape[1]


@dataclass
class VisualFeatureMap:
    """H' x W' x C dense features plus the source image size in pixels."""

    tensor: np.ndarray
    source_size: tuple[int, int]

    def __post_init__(self) -> None:
        self.tensor = np.asarray(self.tensor, dtype=np.float64)
        if self.tensor.ndim != 3 or min(self.tensor.shape[:2]) < 1:
            raise ValueError(f"expected (H', W', C) tensor, got {self.tensor.shape}")
        if not np.isfinite(self.tensor).all():
            raise ValueError("visual feature map contains NaN/Inf")

    @property
    def embed_dim(self) -> int:
        return self.tensor.shape[2]

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.tensor.shape[0], self.tensor.shape[1]


def apply_prompt_template(class_names: Sequence[str], template: str) -> PromptSet:
    """Render one prompt per class name.

    The template must contain exactly one ``{class}`` placeholder; class names
    must be non-empty strings. Order is preserved.
    """
    if template.count(PLACEHOLDER) != 1:
        raise ValueError(
            f"template must contain exactly one {PLACEHOLDER!r} placeholder, got: {template!r}"
        )
    for name in class_names:
        if not isinstance(name, str) or not name:
            raise ValueError(f"class names must be non-empty strings, got {name!r}")
    prompts = tuple(template.replace(PLACEHOLDER, name) for name in class_names)
    return PromptSet(tuple(class_names), template, prompts)


def _seeded_unit_vector(key: str, dim: int) -> np.ndarray:
    rng = np.random.default_rng(hash_to_seed(key))
    vec = rng.standard_normal(dim)
    return vec / np.linalg.norm(vec)


def encode_text_synthetic(prompts: PromptSet, embed_dim: int, seed_namespace: str) -> TextEmbedding:
    """Deterministic stand-in for a frozen text encoder.

    Each prompt string is hashed (together with the namespace) into a seed and
    expanded into a unit-norm gaussian row; identical prompts always map to
    identical rows.
    """
    if embed_dim < 2:
        raise ValueError(f"embed_dim must be >= 2, got {embed_dim}")
    rows = [_seeded_unit_vector(f"{seed_namespace}|txt|{p}", embed_dim) for p in prompts.prompts]
    matrix = np.stack(rows, axis=0) if rows else np.zeros((0, embed_dim))
    return TextEmbedding(matrix=matrix, class_names=prompts.class_names)


def _quantize_color(rgb: np.ndarray) -> str:
    return ",".join(f"{float(v):.4f}" for v in rgb)


def synthetic_patch_feature(rgb: Sequence[float], embed_dim: int, seed_namespace: str) -> np.ndarray:
    """Feature the synthetic image encoder assigns to a flat patch of colour ``rgb``.

    Exposed so the dataset generator can key class colours against the encoder.
    """
    key = f"{seed_namespace}|img|{_quantize_color(np.asarray(rgb, dtype=np.float64))}"
    return _seeded_unit_vector(key, embed_dim)


def encode_image_synthetic(
    image: np.ndarray, embed_dim: int, downsample: int, seed_namespace: str
) -> VisualFeatureMap:
    """Deterministic stand-in for a frozen image encoder.

    The image is split into ``downsample x downsample`` patches; each patch's
    mean colour is hashed into a unit-norm feature.  Flat patches therefore
    depend only on their colour, which makes the generator's class regions
    linearly separable downstream.
    """
    if embed_dim < 2:
        raise ValueError(f"embed_dim must be >= 2, got {embed_dim}")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    k = int(downsample)
    if k < 1 or h % k != 0 or w % k != 0:
        raise ValueError(f"image size {h}x{w} not divisible by downsample factor {k}")
    gh, gw = h // k, w // k
    patches = image.astype(np.float64).reshape(gh, k, gw, k, 3)
    means = patches.mean(axis=(1, 3))  # (gh, gw, 3)

    # Hash each distinct patch colour once; real images rarely repeat colours,
    # the synthetic ones almost always do.
    flat = means.reshape(-1, 3)
    keys = [_quantize_color(c) for c in flat]
    cache: dict[str, np.ndarray] = {}
    feats = np.empty((flat.shape[0], embed_dim), dtype=np.float64)
    for i, key in enumerate(keys):
        vec = cache.get(key)
        if vec is None:
            vec = _seeded_unit_vector(f"{seed_namespace}|img|{key}", embed_dim)
            cache[key] = vec
        feats[i] = vec
    return VisualFeatureMap(tensor=feats.reshape(gh, gw, embed_dim), source_size=(h, w))


class EncoderAdapter(Protocol):
    """Interface a real vision-language model must provide to replace the
    synthetic encoders. No weights ship with this repo."""

    def encode_text(self, prompts: PromptSet) -> TextEmbedding: ...

    def encode_image(self, image: np.ndarray) -> VisualFeatureMap: ...

    def patch_stride(self) -> int: ...


@dataclass
class SyntheticEncoder:
    """Bundles the two synthetic encoders behind the adapter interface."""

    embed_dim: int
    stride: int
    namespace: str

    def encode_text(self, prompts: PromptSet) -> TextEmbedding:
        return encode_text_synthetic(prompts, self.embed_dim, self.namespace)

    def encode_image(self, image: np.ndarray) -> VisualFeatureMap:
        return encode_image_synthetic(image, self.embed_dim, self.stride, self.namespace)

    def patch_stride(self) -> int:
        return self.stride
