"""Delta-correlation training diagnostics and their plots.

The delta volume is the raw (pre-aggregation) cost volume with the
perturbation modules active minus the same volume with them as identities.
Four statistics summarize it per image: the mean response change inside
ground-truth regions (gt_in_mean), outside them (non_gt_mean), their
difference (gap), and the ratio gt_in_mean / (|non_gt_mean| + eps) clamped
below at zero (align_ratio).  A ratio above 1 means the in-target response
gain dominates what leaks outside.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

ALIGN_EPS = 1e-8
DELTA_KEYS = ("gt_in_mean", "non_gt_mean", "gap", "align_ratio")


@dataclass
class DeltaStats:
    gt_in_mean: float
    non_gt_mean: float
    gap: float
    align_ratio: float
    step: int = 0


def downsample_labels_majority(gt: np.ndarray, factor: int, ignore_index: int = 255) -> np.ndarray:
    """Majority vote per factor x factor cell over non-ignored pixels; empty
    cells and exact ties become ignore."""
    gt = np.asarray(gt)
    h, w = gt.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"labels {h}x{w} not divisible by factor {factor}")
    blocks = gt.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h // factor, w // factor, factor * factor)
    out = np.full((h // factor, w // factor), ignore_index, dtype=np.uint8)
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            votes = blocks[i, j]
            votes = votes[votes != ignore_index]
            if votes.size == 0:
                continue
            counts = np.bincount(votes)
            top = counts.max()
            winners = np.flatnonzero(counts == top)
            if winners.size == 1:
                out[i, j] = winners[0]
    return out


def delta_cost(
    model,
    visual: torch.Tensor,
    text: torch.Tensor,
    rng: np.random.Generator,
    draws: int = 1,
) -> torch.Tensor:
    """Perturbed-minus-clean raw cost volume, averaged over ``draws`` noise
    draws; shaped (B, H', W', N).  Restores the model's mode on exit."""
    was_training = model.training
    try:
        model.eval()
        with torch.no_grad():
            clean = model.raw_cost(visual, text)
        model.train()
        total = torch.zeros_like(clean)
        with torch.no_grad():
            for _ in range(max(1, draws)):
                total += model.raw_cost(visual, text, rng=rng) - clean
        return total / max(1, draws)
    finally:
        model.train(was_training)


def delta_stats(
    delta: np.ndarray, gt_small: np.ndarray, eps: float = ALIGN_EPS, step: int = 0,
    ignore_index: int = 255,
) -> DeltaStats | None:
    """Per-image statistics over classes present in the (cost-grid resolution)
    ground truth.  Classes whose inside or outside region is empty cannot be
    measured and are skipped; returns None when nothing is measurable."""
    delta = np.asarray(delta, dtype=np.float64)
    gt_small = np.asarray(gt_small)
    if delta.shape[:2] != gt_small.shape:
        raise ValueError(f"delta grid {delta.shape[:2]} does not match labels {gt_small.shape}")
    valid = gt_small != ignore_index
    present = np.unique(gt_small[valid])
    in_means, out_means = [], []
    for c in present:
        inside = gt_small == c
        outside = valid & ~inside
        if not inside.any() or not outside.any():
            continue
        in_means.append(float(delta[..., c][inside].mean()))
        out_means.append(float(delta[..., c][outside].mean()))
    if not in_means:
        return None
    gt_in = float(np.mean(in_means))
    non_gt = float(np.mean(out_means))
    ratio = max(0.0, gt_in / (abs(non_gt) + eps))
    return DeltaStats(gt_in_mean=gt_in, non_gt_mean=non_gt, gap=gt_in - non_gt, align_ratio=ratio, step=step)


def batch_delta_stats(per_image: list[DeltaStats | None], step: int = 0, eps: float = ALIGN_EPS) -> DeltaStats | None:
    """Average per-image statistics (order-invariant); align_ratio is recomputed
    from the averaged means so the gap identity holds exactly."""
    stats = [s for s in per_image if s is not None]
    if not stats:
        return None
    gt_in = float(np.mean([s.gt_in_mean for s in stats]))
    non_gt = float(np.mean([s.non_gt_mean for s in stats]))
    ratio = max(0.0, gt_in / (abs(non_gt) + eps))
    return DeltaStats(gt_in_mean=gt_in, non_gt_mean=non_gt, gap=gt_in - non_gt, align_ratio=ratio, step=step)


# ---------------------------------------------------------------------------
# plots


def _read_log(log_path: Path) -> list[dict]:
    records = []
    for line in Path(log_path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records


def emit_plots(log_path: Path, out_dir: Path) -> list[Path]:
    """Render one curve per delta statistic plus a combined panel.

    Each figure gets a sibling CSV with the exact plotted points.  Reads only
    the JSON-lines training log; returns the files written (empty, with a
    warning, when the log holds no delta records).
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = _read_log(log_path)
    if not records:
        log.warning("empty training log %s; nothing to plot", log_path)
        return []
    series: dict[str, list[tuple[int, float]]] = {k: [] for k in DELTA_KEYS}
    for rec in records:
        for key in DELTA_KEYS:
            if key in rec and rec[key] is not None:
                series[key].append((int(rec["step"]), float(rec[key])))
    if not any(series.values()):
        log.warning("no delta statistics in %s; nothing to plot", log_path)
        return []

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def save_csv(key: str, points: list[tuple[int, float]]) -> None:
        csv_path = out_dir / f"{key}.csv"
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", key])
            writer.writerows(points)
        written.append(csv_path)

    for key, points in series.items():
        if not points:
            log.warning("statistic %s missing from %s; skipping its plot", key, log_path)
            continue
        steps, values = zip(*points)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(steps, values, marker="o", markersize=2.5, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        png = out_dir / f"{key}.png"
        fig.savefig(png, dpi=120)
        plt.close(fig)
        written.append(png)
        save_csv(key, list(points))

    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for ax, key in zip(axes.ravel(), DELTA_KEYS):
        points = series[key]
        if points:
            steps, values = zip(*points)
            ax.plot(steps, values, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    panel = out_dir / "delta_panel.png"
    fig.savefig(panel, dpi=120)
    plt.close(fig)
    written.append(panel)
    return written


def stats_to_record(stats: DeltaStats) -> dict:
    d = asdict(stats)
    d.pop("step")
    return d
