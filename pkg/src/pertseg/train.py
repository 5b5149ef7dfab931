"""Training loop: loss, cosine schedule, AdamW updates, checkpoints, logging.

Determinism contract: every random draw (parameter init, batch order, noise)
flows from ``TrainConfig.seed`` through named substreams, and the training
stream's state is checkpointed, so identical configs reproduce identical
metric logs and a mid-run resume continues the uninterrupted run bit-exactly
on the same platform.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, load_manifest, read_image, read_mask, write_mask
from .diagnostics import batch_delta_stats, delta_cost, delta_stats, downsample_labels_majority, stats_to_record
from .encoders import TextEmbedding, apply_prompt_template, encode_image_synthetic, encode_text_synthetic
from .metrics import ConfusionMatrix, EvalReport, dataset_report, split_report
from .model import SegmentationModel
from .perturb import NoiseSpec
from .rng import substream


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # data / encoders
    train_manifest: str = ""
    out_dir: str = "runs/default"
    embed_dim: int = 64
    patch_stride: int = 4
    encoder_namespace: str = "synthetic-vlm"
    template: str = "a photo of {class}"
    # model
    feature_dim: int = 64
    num_blocks: int = 2
    window: int = 5
    text_init_scale: float = 0.02
    reduction_ratio: int = 2
    use_text_perturb: bool = True
    use_image_perturb: bool = True
    zero_image_perturb: bool = False  # zero every image-perturbation weight at init
    text_noise: NoiseSpec = field(default_factory=NoiseSpec)
    image_noise: NoiseSpec = field(default_factory=NoiseSpec)
    # optimization
    total_steps: int = 40_000
    batch_size: int = 8
    base_lr: float = 2e-4
    warmup_steps: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    # logging / checkpointing
    log_every: int = 1
    diag_every: int = 50
    diag_draws: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    ignore_index: int = 255

    def __post_init__(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 1):
            raise ValueError("warmup_steps must lie within the step budget")

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["text_noise"] = self.text_noise.to_config()
        data["image_noise"] = self.image_noise.to_config()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "text_noise" in kwargs:
            kwargs["text_noise"] = NoiseSpec.from_config(kwargs["text_noise"])
        if "image_noise" in kwargs:
            kwargs["image_noise"] = NoiseSpec.from_config(kwargs["image_noise"])
        return cls(**kwargs)


# Desk-scale preset: small enough to train on a laptop CPU in minutes while
# still exercising every stage of the pipeline.
DESK_PRESET = {
    "embed_dim": 64,
    "patch_stride": 4,
    "feature_dim": 64,
    "num_blocks": 2,
    "window": 5,
    "total_steps": 600,
    "batch_size": 8,
    "base_lr": 2e-3,
    "weight_decay": 1e-4,
    "log_every": 10,
    "diag_every": 50,
}

PRESETS = {"desk": DESK_PRESET, "paper": {}}


def apply_preset(config: TrainConfig, preset: str) -> TrainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    return dataclasses.replace(config, **PRESETS[preset])


def compute_loss(logits: torch.Tensor, gt: torch.Tensor, ignore_index: int = 255) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels.

    logits: (B, H, W, N); gt: (B, H, W) integer labels in {0..N-1, ignore}.
    All-ignored input yields a zero loss with zero gradients.
    """
    if logits.shape[:-1] != gt.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs gt {tuple(gt.shape)}")
    n = logits.shape[-1]
    gt = gt.long()
    valid = gt != ignore_index
    if bool(((gt >= n) & valid).any()) or bool((gt[valid] < 0).any() if valid.any() else False):
        raise ValueError(f"ground-truth class index out of range [0, {n})")
    if not valid.any():
        return logits.sum() * 0.0
    flat_logits = logits.reshape(-1, n)[valid.reshape(-1)]
    flat_gt = gt.reshape(-1)[valid.reshape(-1)]
    return F.cross_entropy(flat_logits, flat_gt)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to zero over the remaining
    steps; clamps to the final value past the end."""
    step = min(step, config.total_steps)
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    span = config.total_steps - config.warmup_steps
    if span <= 0:
        return config.base_lr
    progress = (step - config.warmup_steps) / span
    return max(0.0, config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress)))


def build_model(config: TrainConfig, dtype: torch.dtype = torch.float32) -> SegmentationModel:
    model = SegmentationModel(
        embed_dim=config.embed_dim,
        feature_dim=config.feature_dim,
        num_blocks=config.num_blocks,
        window=config.window,
        text_init_scale=config.text_init_scale,
        reduction_ratio=config.reduction_ratio,
        use_text_perturb=config.use_text_perturb,
        use_image_perturb=config.use_image_perturb,
        text_noise=config.text_noise,
        image_noise=config.image_noise,
        seed=config.seed,
        dtype=dtype,
    )
    if config.zero_image_perturb and model.image_perturb is not None:
        with torch.no_grad():
            for p in model.image_perturb.parameters():
                p.zero_()
    return model


@dataclass
class LoadedDataset:
    manifest: DatasetManifest
    text: TextEmbedding
    features: list[np.ndarray]  # (H', W', C) per image
    masks: list[np.ndarray]  # (H, W) uint8 per image
    image_sizes: list[tuple[int, int]]


def load_dataset(manifest_path: str | Path, config: TrainConfig) -> LoadedDataset:
    """Load a manifest and precompute frozen encoder outputs for every image."""
    manifest = load_manifest(Path(manifest_path))
    prompts = apply_prompt_template(manifest.categories, config.template)
    text = encode_text_synthetic(prompts, config.embed_dim, config.encoder_namespace)
    features, masks, sizes = [], [], []
    for idx in range(len(manifest.pairs)):
        image = read_image(manifest.image_path(idx))
        vmap = encode_image_synthetic(image, config.embed_dim, config.patch_stride, config.encoder_namespace)
        features.append(vmap.tensor)
        masks.append(read_mask(manifest.mask_path(idx)))
        sizes.append(vmap.source_size)
    return LoadedDataset(manifest=manifest, text=text, features=features, masks=masks, image_sizes=sizes)


@dataclass
class StepMetrics:
    step: int
    loss: float
    lr: float
    delta: dict | None = None

    def to_record(self) -> dict:
        rec = {"step": self.step, "loss": self.loss, "lr": self.lr}
        if self.delta is not None:
            rec.update(self.delta)
        return rec


def _batch_tensors(
    data: LoadedDataset, indices: np.ndarray, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    feats = torch.from_numpy(np.stack([data.features[i] for i in indices])).to(dtype)
    masks = torch.from_numpy(np.stack([data.masks[i] for i in indices]).astype(np.int64))
    return feats, masks


def train_step(
    model: SegmentationModel,
    optimizer: torch.optim.Optimizer,
    text: torch.Tensor,
    feats: torch.Tensor,
    gt: torch.Tensor,
    step: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> StepMetrics:
    """One forward / loss / backward / AdamW update at lr_at(step)."""
    lr = lr_at(step, config)
    for group in optimizer.param_groups:
        group["lr"] = lr
    model.train()
    optimizer.zero_grad(set_to_none=True)
    target_size = (gt.shape[1], gt.shape[2])
    logits = model(feats, text, target_size, rng=rng)
    loss = compute_loss(logits, gt, config.ignore_index)
    loss_value = float(loss.detach())
    if not math.isfinite(loss_value):
        raise NonFiniteLossError(f"non-finite loss {loss_value} at step {step}")
    loss.backward()
    if config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return StepMetrics(step=step, loss=loss_value, lr=lr)


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: Path,
    model: SegmentationModel,
    optimizer: torch.optim.Optimizer,
    step: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "step": step,
        "config": config.to_dict(),
        "rng_state": rng.bit_generator.state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: Path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    return payload


def model_from_checkpoint(path: Path, dtype: torch.dtype = torch.float32) -> tuple[SegmentationModel, TrainConfig]:
    payload = load_checkpoint(path)
    config = TrainConfig.from_dict(payload["config"])
    model = build_model(config, dtype=dtype)
    model.load_state_dict(payload["model"])
    model.eval()
    return model, config


# ---------------------------------------------------------------------------
# full runs


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    final_step: int
    final_loss: float | None


def _diagnostics_record(
    model: SegmentationModel,
    text: torch.Tensor,
    feats: torch.Tensor,
    masks: np.ndarray,
    step: int,
    config: TrainConfig,
    rng: np.random.Generator,
) -> dict | None:
    delta = delta_cost(model, feats, text, rng, draws=config.diag_draws).numpy()
    per_image = []
    for b in range(delta.shape[0]):
        small = downsample_labels_majority(masks[b], config.patch_stride, config.ignore_index)
        per_image.append(delta_stats(delta[b], small, step=step, ignore_index=config.ignore_index))
    merged = batch_delta_stats(per_image, step=step)
    return stats_to_record(merged) if merged is not None else None


def run_training(config: TrainConfig, resume: Path | None = None) -> TrainResult:
    """Execute the configured number of steps; emit a JSON-lines metrics log
    and checkpoints (periodic if configured, always at the end).

    On a non-finite loss the run aborts cleanly: the current state goes to
    ``abort_state.json`` plus a partial checkpoint, then the error re-raises.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")

    data = load_dataset(config.train_manifest, config)
    dtype = torch.float32
    text = torch.from_numpy(data.text.matrix).to(dtype)
    model = build_model(config, dtype=dtype)
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.base_lr, weight_decay=config.weight_decay)
    stream = substream(config.seed, "train")
    start_step = 0

    if resume is not None:
        payload = load_checkpoint(resume)
        saved = dict(payload["config"])
        current = config.to_dict()
        saved.pop("out_dir", None)
        current.pop("out_dir", None)
        if saved != current:
            raise ValueError("resume checkpoint was produced by a different config")
        model.load_state_dict(payload["model"])
        optimizer.load_state_dict(payload["optimizer"])
        stream.bit_generator.state = payload["rng_state"]
        start_step = int(payload["step"])

    log_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint_final.pt"
    mode = "a" if resume is not None else "w"
    n_images = len(data.features)
    last_loss: float | None = None

    with log_path.open(mode, encoding="utf-8") as log_file:
        for step in range(start_step, config.total_steps):
            replace = n_images < config.batch_size
            indices = stream.choice(n_images, size=config.batch_size, replace=replace)
            feats, gt = _batch_tensors(data, indices, dtype)
            try:
                metrics = train_step(model, optimizer, text, feats, gt, step, config, stream)
            except NonFiniteLossError as err:
                (out_dir / "abort_state.json").write_text(
                    json.dumps({"step": step, "error": str(err)}, indent=2) + "\n", encoding="utf-8"
                )
                save_checkpoint(out_dir / "checkpoint_abort.pt", model, optimizer, step, config, stream)
                raise
            last_loss = metrics.loss
            if config.diag_every > 0 and (step + 1) % config.diag_every == 0:
                masks_np = np.stack([data.masks[i] for i in indices])
                metrics.delta = _diagnostics_record(model, text, feats, masks_np, step, config, stream)
            if config.log_every > 0 and ((step + 1) % config.log_every == 0 or step + 1 == config.total_steps):
                log_file.write(json.dumps(metrics.to_record()) + "\n")
                log_file.flush()
            done = step + 1
            if config.checkpoint_every > 0 and done % config.checkpoint_every == 0 and done < config.total_steps:
                save_checkpoint(out_dir / f"checkpoint_{done:06d}.pt", model, optimizer, done, config, stream)

    save_checkpoint(ckpt_path, model, optimizer, config.total_steps, config, stream)
    return TrainResult(checkpoint_path=ckpt_path, log_path=log_path, final_step=config.total_steps, final_loss=last_loss)


# ---------------------------------------------------------------------------
# evaluation driver (shared by the CLI and the tests)


def evaluate_dataset(
    model: SegmentationModel,
    manifest_path: str | Path,
    config: TrainConfig,
    use_manifest_split: bool = True,
    maps_dir: Path | None = None,
    logits_dir: Path | None = None,
) -> EvalReport:
    """Eval-mode pass over one dataset manifest; returns its metric report.

    Optionally writes predicted maps (8-bit indexed PNG) and, for debugging,
    raw float32 logits as .npy files.
    """
    data = load_dataset(manifest_path, config)
    model.eval()
    dtype = next(model.parameters()).dtype
    text = torch.from_numpy(data.text.matrix).to(dtype)
    cm = ConfusionMatrix.empty(data.manifest.num_classes)
    for directory in (maps_dir, logits_dir):
        if directory is not None:
            Path(directory).mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for idx, (feats_np, mask, size) in enumerate(zip(data.features, data.masks, data.image_sizes)):
            feats = torch.from_numpy(feats_np[None]).to(dtype)
            logits = model(feats, text, size)
            pred = np.argmax(logits[0].numpy(), axis=-1).astype(np.uint8)
            cm.update(pred, mask, data.manifest.ignore_index)
            if maps_dir is not None:
                write_mask(pred, Path(maps_dir) / f"{idx:04d}.png")
            if logits_dir is not None:
                np.save(Path(logits_dir) / f"{idx:04d}.npy", logits[0].numpy().astype(np.float32))
    report = dataset_report(
        cm, data.manifest.categories, data.manifest.dataset_id, data.manifest.native_resolution
    )
    if use_manifest_split and (data.manifest.seen or data.manifest.unseen):
        split_report(report, data.manifest.seen, data.manifest.unseen)
    return report


def train_eval_parity(model: SegmentationModel, data: LoadedDataset, config: TrainConfig) -> bool:
    """Whether a train-mode forward (with fixed weights and a probe noise
    stream) is bit-identical to the eval-mode forward. Holds whenever both
    perturbation modules are exact identities at the current weights."""
    was_training = model.training
    dtype = next(model.parameters()).dtype
    text = torch.from_numpy(data.text.matrix).to(dtype)
    count = min(2, len(data.features))
    feats = torch.from_numpy(np.stack(data.features[:count])).to(dtype)
    size = data.image_sizes[0]
    probe = substream(config.seed, "parity-probe")
    try:
        model.train()
        with torch.no_grad():
            train_out = model(feats, text, size, rng=probe)
        model.eval()
        with torch.no_grad():
            eval_out = model(feats, text, size)
    finally:
        model.train(was_training)
    return bool(torch.equal(train_out, eval_out))
