"""Dataset manifests, taxonomy mapping, overlap analysis, synthetic data.

A manifest is a JSON document describing one dataset: ordered category list,
image/mask pairs, native resolution, optional seen/unseen split.  Masks are
single-channel 8-bit PNGs holding class IDs 0..N-1 with 255 reserved for
ignore.  The exact schema lives in docs/formats.md.

The synthetic generator draws axis-aligned rectangles and ellipses in flat
per-class colours over a background class.  Class colours are rejection-
sampled against the synthetic encoders so that each class's own prompt scores
the highest raw cosine at its pixels (a stand-in for the cross-modal alignment
a pretrained vision-language model would provide); without that property an
unseen-class protocol on hashed features would measure pure noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .encoders import apply_prompt_template, encode_text_synthetic, synthetic_patch_feature
from .rng import substream

IGNORE_INDEX = 255
DROP = "DROP"


# ---------------------------------------------------------------------------
# manifests


@dataclass
class DatasetManifest:
    dataset_id: str
    root: Path  # directory image/mask paths are relative to
    pairs: list[tuple[str, str]]
    categories: tuple[str, ...]
    native_resolution: tuple[float, float]  # (W, H)
    ignore_index: int = IGNORE_INDEX
    seen: tuple[str, ...] = ()
    unseen: tuple[str, ...] = ()

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def image_path(self, index: int) -> Path:
        return self.root / self.pairs[index][0]

    def mask_path(self, index: int) -> Path:
        return self.root / self.pairs[index][1]

    def to_dict(self) -> dict:
        data = {
            "dataset_id": self.dataset_id,
            "categories": list(self.categories),
            "native_resolution": [float(self.native_resolution[0]), float(self.native_resolution[1])],
            "ignore_index": self.ignore_index,
            "pairs": [{"image": img, "mask": msk} for img, msk in self.pairs],
        }
        if self.seen or self.unseen:
            data["split"] = {"seen": list(self.seen), "unseen": list(self.unseen)}
        return data


def write_mask(mask: np.ndarray, path: Path) -> None:
    mask = np.asarray(mask, dtype=np.uint8)
    Image.fromarray(mask, mode="L").save(path, format="PNG")


def read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def write_image(image: np.ndarray, path: Path) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_manifest(manifest: DatasetManifest, path: Path) -> None:
    """Canonical form: 2-space indent, fixed key order, trailing newline, so a
    load/save round trip is byte-identical."""
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path: Path, scan_masks: bool = True) -> DatasetManifest:
    """Load and validate a manifest.

    With ``scan_masks`` every referenced mask is read and checked for values
    outside {0..N-1, ignore_index}; errors name the offending file.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    categories = tuple(data["categories"])
    if not categories:
        raise ValueError(f"{path}: empty category list")
    if len(set(categories)) != len(categories):
        raise ValueError(f"{path}: duplicate categories")
    if len(categories) > IGNORE_INDEX:
        raise ValueError(f"{path}: more than {IGNORE_INDEX} categories do not fit 8-bit masks")
    pairs = [(p["image"], p["mask"]) for p in data["pairs"]]
    if not pairs:
        raise ValueError(f"{path}: empty pair list")
    res = data["native_resolution"]
    split = data.get("split", {})
    manifest = DatasetManifest(
        dataset_id=data["dataset_id"],
        root=path.parent,
        pairs=pairs,
        categories=categories,
        native_resolution=(float(res[0]), float(res[1])),
        ignore_index=int(data.get("ignore_index", IGNORE_INDEX)),
        seen=tuple(split.get("seen", [])),
        unseen=tuple(split.get("unseen", [])),
    )
    for img_rel, mask_rel in manifest.pairs:
        img_path = manifest.root / img_rel
        mask_path = manifest.root / mask_rel
        if not img_path.is_file():
            raise FileNotFoundError(f"{path}: missing image file {img_path}")
        if not mask_path.is_file():
            raise FileNotFoundError(f"{path}: missing mask file {mask_path}")
        if scan_masks:
            mask = read_mask(mask_path)
            bad = (mask >= manifest.num_classes) & (mask != manifest.ignore_index)
            if bad.any():
                raise ValueError(
                    f"{path}: mask {mask_path} contains out-of-range value "
                    f"{int(mask[bad][0])} (N={manifest.num_classes})"
                )
    unknown_split = [n for n in (*manifest.seen, *manifest.unseen) if n not in categories]
    if unknown_split:
        raise ValueError(f"{path}: split names not in categories: {unknown_split}")
    return manifest


# ---------------------------------------------------------------------------
# taxonomy mapping


def load_taxonomy(path: Path) -> dict[str, str]:
    """Parse a two-column taxonomy table: ``raw<TAB>unified`` per line,
    ``#`` comments, unified name ``DROP`` sends pixels to ignore."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'raw<TAB>unified', got {line!r}")
        raw, unified = parts[0].strip(), parts[1].strip()
        if raw in mapping:
            raise ValueError(f"{path}:{lineno}: duplicate raw category {raw!r}")
        mapping[raw] = unified
    return mapping


def map_taxonomy(
    manifest: DatasetManifest,
    mapping: dict[str, str],
    unified_vocab: tuple[str, ...],
    out_dir: Path,
) -> DatasetManifest:
    """Rewrite mask class IDs into the unified vocabulary.

    The mapping must cover every manifest category; DROP targets become the
    ignore index.  Remapped masks are written under ``out_dir`` and a new
    manifest is saved alongside them.
    """
    unmapped = [c for c in manifest.categories if c not in mapping]
    if unmapped:
        raise ValueError(f"taxonomy mapping is not total; unmapped categories: {unmapped}")
    bad_targets = sorted({u for u in mapping.values() if u != DROP and u not in unified_vocab})
    if bad_targets:
        raise ValueError(f"mapping targets outside the unified vocabulary: {bad_targets}")

    unified_index = {name: i for i, name in enumerate(unified_vocab)}
    lut = np.full(256, manifest.ignore_index, dtype=np.uint8)
    lut[manifest.ignore_index] = manifest.ignore_index
    for raw_id, raw_name in enumerate(manifest.categories):
        target = mapping[raw_name]
        lut[raw_id] = manifest.ignore_index if target == DROP else unified_index[target]

    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    pairs = []
    for idx, (img_rel, _) in enumerate(manifest.pairs):
        mask = read_mask(manifest.mask_path(idx))
        remapped = lut[mask]
        mask_rel = f"masks/{idx:04d}.png"
        write_mask(remapped, out_dir / mask_rel)
        # Images are not copied; reference them where they already live.
        pairs.append((str(manifest.image_path(idx).resolve()), mask_rel))

    mapped = DatasetManifest(
        dataset_id=f"{manifest.dataset_id}-unified",
        root=out_dir,
        pairs=pairs,
        categories=tuple(unified_vocab),
        native_resolution=manifest.native_resolution,
        ignore_index=manifest.ignore_index,
    )
    save_manifest(mapped, out_dir / "manifest.json")
    return mapped


# ---------------------------------------------------------------------------
# category overlap


@dataclass
class OverlapEntry:
    dataset_id: str
    raw_unique: int
    covered: int
    test_only: int
    coverage_ratio: float
    covered_names: tuple[str, ...] = ()
    test_only_names: tuple[str, ...] = ()


def overlap_report(train_vocab, manifests: list[DatasetManifest]) -> list[OverlapEntry]:
    """Test-centric category overlap against the training vocabulary."""
    train_set = set(train_vocab)
    entries = []
    for m in manifests:
        cats = list(dict.fromkeys(m.categories))
        covered = tuple(c for c in cats if c in train_set)
        test_only = tuple(c for c in cats if c not in train_set)
        raw = len(cats)
        entries.append(
            OverlapEntry(
                dataset_id=m.dataset_id,
                raw_unique=raw,
                covered=len(covered),
                test_only=len(test_only),
                coverage_ratio=len(covered) / raw if raw else 0.0,
                covered_names=covered,
                test_only_names=test_only,
            )
        )
    return entries


# ---------------------------------------------------------------------------
# synthetic dataset generator


@dataclass
class SynthSpec:
    """Knobs for the procedural dataset.  ``size`` must be divisible by
    ``patch_stride`` (the synthetic encoder's downsample factor); shape
    bounding boxes snap to the same grid so most cells stay flat-coloured."""

    num_images: int = 32
    size: int = 64
    num_classes: int = 4  # including the background class
    shapes_per_image: tuple[int, int] = (1, 3)
    holdout_classes: int = 0
    test_images: int = 0
    patch_stride: int = 4
    embed_dim: int = 64
    namespace: str = "synthetic-vlm"
    template: str = "a photo of {class}"
    shape_kinds: tuple[str, ...] = ("rect", "ellipse")
    min_side: int = 16
    max_side: int = 40
    # Alignment band for the colour search, in units of 1/sqrt(embed_dim).
    align_lo: float = 2.8
    align_hi: float = 4.5
    cross_max: float = 2.2
    # Extra band width for holdout classes: their own-prompt cosine may fall
    # this far outside the seen band on either side, emulating the weaker
    # cross-modal calibration of concepts missing from the training
    # distribution.
    holdout_align_widen: float = 0.0

    def __post_init__(self) -> None:
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.size % self.patch_stride != 0:
            raise ValueError(f"size {self.size} not divisible by patch stride {self.patch_stride}")
        if self.num_classes < 2:
            raise ValueError("need a background class plus at least one shape class")
        if not 0 <= self.holdout_classes <= self.num_classes - 2:
            raise ValueError("holdout_classes must leave at least one trainable shape class")
        if self.holdout_classes > 0 and self.test_images < 1:
            raise ValueError("holdout classes need test_images >= 1")
        if any(k not in ("rect", "ellipse") for k in self.shape_kinds):
            raise ValueError(f"unknown shape kind in {self.shape_kinds}")

    def class_names(self) -> tuple[str, ...]:
        return ("background",) + tuple(f"object-{i:02d}" for i in range(1, self.num_classes))


def _pick_class_colors(spec: SynthSpec, rng: np.random.Generator) -> dict[str, tuple[int, int, int]]:
    """Rejection-sample one colour per class so that, under the synthetic
    encoders, the class's own prompt wins the cosine against all other class
    prompts by a controlled margin.

    With ``holdout_align_widen`` > 0, holdout classes land in the extension
    zones just outside the seen band (alternating below and above it), so
    their alignment strength is one the training classes never exhibit.
    """
    names = spec.class_names()
    prompts = apply_prompt_template(names, spec.template)
    text = encode_text_synthetic(prompts, spec.embed_dim, spec.namespace).matrix
    sigma = 1.0 / math.sqrt(spec.embed_dim)
    cross = spec.cross_max * sigma
    holdout_ids = set(range(spec.num_classes - spec.holdout_classes, spec.num_classes))

    def own_band(class_id: int) -> tuple[float, float]:
        lo, hi = spec.align_lo, spec.align_hi
        if spec.holdout_align_widen > 0 and class_id in holdout_ids:
            rank = class_id - (spec.num_classes - spec.holdout_classes)
            if rank % 2 == 0:
                lo, hi = max(spec.cross_max, lo - spec.holdout_align_widen), lo
            else:
                lo, hi = hi, hi + spec.holdout_align_widen
        return lo * sigma, hi * sigma

    colors: dict[str, tuple[int, int, int]] = {}
    used: set[tuple[int, int, int]] = set()
    max_trials = 50_000
    for i, name in enumerate(names):
        lo, hi = own_band(i)
        found = None
        for _ in range(max_trials):
            candidate = tuple(int(v) for v in rng.integers(0, 256, size=3))
            if candidate in used:
                continue
            feat = synthetic_patch_feature(candidate, spec.embed_dim, spec.namespace)
            sims = text @ feat
            others = np.delete(sims, i)
            if lo <= sims[i] <= hi and (others.size == 0 or np.abs(others).max() <= cross):
                found = candidate
                break
        if found is None:
            raise ValueError(
                f"could not find a distinguishable colour for class {name!r}; "
                "relax the alignment band or lower num_classes"
            )
        colors[name] = found
        used.add(found)
    return colors


def _draw_shape(
    draw_img: ImageDraw.ImageDraw,
    draw_mask: ImageDraw.ImageDraw,
    kind: str,
    box: tuple[int, int, int, int],
    color: tuple[int, int, int],
    class_id: int,
) -> None:
    # PIL boxes are inclusive; shrink by one so the filled area is exactly box.
    x0, y0, x1, y1 = box
    pil_box = (x0, y0, x1 - 1, y1 - 1)
    if kind == "rect":
        draw_img.rectangle(pil_box, fill=color)
        draw_mask.rectangle(pil_box, fill=class_id)
    else:
        draw_img.ellipse(pil_box, fill=color)
        draw_mask.ellipse(pil_box, fill=class_id)


def _render_image(
    spec: SynthSpec,
    colors: dict[str, tuple[int, int, int]],
    shape_classes: list[int],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    names = spec.class_names()
    size = spec.size
    k = spec.patch_stride
    img = Image.new("RGB", (size, size), colors[names[0]])
    mask = Image.new("L", (size, size), 0)
    draw_img = ImageDraw.Draw(img)
    draw_mask = ImageDraw.Draw(mask)
    cells = size // k
    min_cells = max(1, spec.min_side // k)
    max_cells = max(min_cells, min(cells, spec.max_side // k))
    for class_id in shape_classes:
        w = int(rng.integers(min_cells, max_cells + 1)) * k
        h = int(rng.integers(min_cells, max_cells + 1)) * k
        x0 = int(rng.integers(0, (size - w) // k + 1)) * k
        y0 = int(rng.integers(0, (size - h) // k + 1)) * k
        kind = spec.shape_kinds[int(rng.integers(0, len(spec.shape_kinds)))]
        _draw_shape(draw_img, draw_mask, kind, (x0, y0, x0 + w, y0 + h), colors[names[class_id]], class_id)
    return np.asarray(img, dtype=np.uint8), np.asarray(mask, dtype=np.uint8)


def generate_synthetic_dataset(spec: SynthSpec, out_dir: Path, seed: int) -> dict[str, Path]:
    """Write images, masks, and manifests; returns {"train": ..., "test": ...}.

    Deterministic: the same (spec, seed) produces byte-identical files.  When
    ``holdout_classes`` > 0, the last that many shape classes never appear in
    training images; every test image contains at least one of them, and the
    test manifest carries the corresponding seen/unseen split.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng_colors = substream(seed, "synth", "colors")
    rng_layout = substream(seed, "synth", "layout")

    names = spec.class_names()
    colors = _pick_class_colors(spec, rng_colors)
    (out_dir / "colors.json").write_text(
        json.dumps({n: list(c) for n, c in colors.items()}, indent=2) + "\n", encoding="utf-8"
    )

    shape_ids = list(range(1, spec.num_classes))
    holdout_ids = shape_ids[len(shape_ids) - spec.holdout_classes :] if spec.holdout_classes else []
    seen_shape_ids = [i for i in shape_ids if i not in holdout_ids]
    lo, hi = spec.shapes_per_image

    def make_split(prefix: str, count: int, allowed: list[int], force: list[int]) -> list[tuple[str, str]]:
        pairs = []
        for idx in range(count):
            n_shapes = int(rng_layout.integers(lo, hi + 1))
            forced = [int(force[int(rng_layout.integers(0, len(force)))])] if force and n_shapes > 0 else []
            classes = [int(allowed[int(rng_layout.integers(0, len(allowed)))]) for _ in range(n_shapes - len(forced))]
            classes += forced  # drawn last, so it stays on top
            img, mask = _render_image(spec, colors, classes, rng_layout)
            img_rel = f"images/{prefix}-{idx:04d}.png"
            mask_rel = f"masks/{prefix}-{idx:04d}.png"
            write_image(img, out_dir / img_rel)
            write_mask(mask, out_dir / mask_rel)
            pairs.append((img_rel, mask_rel))
        return pairs

    result: dict[str, Path] = {}
    train_names = tuple(n for i, n in enumerate(names) if i not in holdout_ids)
    train_pairs = make_split("train", spec.num_images, seen_shape_ids, [])
    # Train masks use the full ID space but only seen IDs ever occur, so the
    # train manifest can list the seen categories alone.
    train_manifest = DatasetManifest(
        dataset_id="synthetic-train",
        root=out_dir,
        pairs=train_pairs,
        categories=train_names,
        native_resolution=(float(spec.size), float(spec.size)),
    )
    save_manifest(train_manifest, out_dir / "train.json")
    result["train"] = out_dir / "train.json"

    if spec.test_images > 0:
        test_pairs = make_split("test", spec.test_images, shape_ids, holdout_ids)
        test_manifest = DatasetManifest(
            dataset_id="synthetic-test",
            root=out_dir,
            pairs=test_pairs,
            categories=names,
            native_resolution=(float(spec.size), float(spec.size)),
            seen=train_names,
            unseen=tuple(names[i] for i in holdout_ids),
        )
        save_manifest(test_manifest, out_dir / "test.json")
        result["test"] = out_dir / "test.json"
    return result
