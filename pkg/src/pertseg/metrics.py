"""Segmentation metric engine for the unified cross-dataset protocol.

Conventions:
  * IoU_c = TP / (TP + FP + FN); averaged over classes with a nonzero union.
  * ACC_c = TP / (TP + FN), i.e. ground-truth recall; averaged over classes
    that actually appear in the ground truth.
  * Classes absent from both prediction and ground truth are marked absent and
    excluded from every mean; classes with ground-truth pixels always count.
  * Dataset-level means are mIoU/mACC; unweighted means over datasets are
    m-mIoU/m-mACC. Tables render percentages with two decimals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    """Rows = ground truth, columns = prediction; ignored pixels counted apart."""

    counts: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        if num_classes < 1:
            raise ValueError("need at least one class")
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64), ignored=0)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def update(self, pred: np.ndarray, gt: np.ndarray, ignore_index: int = 255) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        n = self.num_classes
        valid = gt != ignore_index
        gt_v = gt[valid].astype(np.int64)
        pred_v = pred[valid].astype(np.int64)
        if gt_v.size and (gt_v.min() < 0 or gt_v.max() >= n):
            raise ValueError(f"ground-truth index out of range [0, {n}) (ignore={ignore_index})")
        if pred_v.size and (pred_v.min() < 0 or pred_v.max() >= n):
            raise ValueError(f"prediction index out of range [0, {n})")
        binned = np.bincount(gt_v * n + pred_v, minlength=n * n).reshape(n, n)
        self.counts += binned
        self.ignored += int((~valid).sum())
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        self.ignored += other.ignored
        return self


@dataclass
class ClassScore:
    name: str
    iou: float | None  # None when the class has an empty union (absent)
    acc: float | None  # None when the class has no ground-truth pixels
    gt_pixels: int
    pred_pixels: int

    @property
    def present(self) -> bool:
        return self.gt_pixels > 0 or self.pred_pixels > 0


def class_metrics(cm: ConfusionMatrix, class_names: tuple[str, ...] | None = None) -> list[ClassScore]:
    n = cm.num_classes
    names = class_names if class_names is not None else tuple(str(i) for i in range(n))
    if len(names) != n:
        raise ValueError("class name count does not match matrix size")
    tp = np.diag(cm.counts).astype(np.float64)
    gt_tot = cm.counts.sum(axis=1).astype(np.float64)
    pred_tot = cm.counts.sum(axis=0).astype(np.float64)
    union = gt_tot + pred_tot - tp
    scores = []
    for c in range(n):
        iou = float(tp[c] / union[c]) if union[c] > 0 else None
        acc = float(tp[c] / gt_tot[c]) if gt_tot[c] > 0 else None
        scores.append(ClassScore(names[c], iou, acc, int(gt_tot[c]), int(pred_tot[c])))
    return scores


def _mean(values: list[float]) -> float:
    return float(np.mean(np.asarray(values, dtype=np.float64)))


@dataclass
class SplitSection:
    seen: tuple[str, ...]
    unseen: tuple[str, ...]
    overall_miou: float
    overall_macc: float
    seen_miou: float | None
    seen_macc: float | None
    unseen_miou: float | None
    unseen_macc: float | None


@dataclass
class EvalReport:
    dataset_id: str
    classes: list[ClassScore]
    miou: float
    macc: float
    split: SplitSection | None = None
    native_resolution: tuple[float, float] | None = None  # (W, H)


def dataset_report(
    cm: ConfusionMatrix,
    class_names: tuple[str, ...],
    dataset_id: str = "",
    native_resolution: tuple[float, float] | None = None,
) -> EvalReport:
    scores = class_metrics(cm, class_names)
    ious = [s.iou for s in scores if s.iou is not None]
    accs = [s.acc for s in scores if s.acc is not None]
    if not ious:
        raise ValueError(f"dataset {dataset_id!r}: no present classes to report on")
    return EvalReport(
        dataset_id=dataset_id,
        classes=scores,
        miou=_mean(ious),
        macc=_mean(accs),
        native_resolution=native_resolution,
    )


def _subset_means(scores: dict[str, ClassScore], names: tuple[str, ...]) -> tuple[float | None, float | None]:
    ious = [scores[n].iou for n in names if scores[n].iou is not None]
    accs = [scores[n].acc for n in names if scores[n].acc is not None]
    return (_mean(ious) if ious else None, _mean(accs) if accs else None)


def split_report(report: EvalReport, seen: tuple[str, ...], unseen: tuple[str, ...]) -> SplitSection:
    """Seen/unseen means over the named classes, plus the overall mean over
    their union. The two sets must be disjoint subsets of the report classes."""
    seen, unseen = tuple(seen), tuple(unseen)
    if set(seen) & set(unseen):
        raise ValueError("seen and unseen class sets overlap")
    by_name = {s.name: s for s in report.classes}
    missing = [n for n in (*seen, *unseen) if n not in by_name]
    if missing:
        raise ValueError(f"split names not in report: {missing}")
    overall_miou, overall_macc = _subset_means(by_name, seen + unseen)
    seen_miou, seen_macc = _subset_means(by_name, seen) if seen else (None, None)
    unseen_miou, unseen_macc = _subset_means(by_name, unseen) if unseen else (None, None)
    if overall_miou is None or overall_macc is None:
        raise ValueError("no present classes in the split")
    section = SplitSection(
        seen=seen,
        unseen=unseen,
        overall_miou=overall_miou,
        overall_macc=overall_macc,
        seen_miou=seen_miou,
        seen_macc=seen_macc,
        unseen_miou=unseen_miou,
        unseen_macc=unseen_macc,
    )
    report.split = section
    return section


RESOLUTION_AREA_THRESHOLD = 800.0 * 800.0


def resolution_group(width: float, height: float) -> str:
    """Datasets with native area below 800x800 are low-resolution; at or above
    (including exactly 800x800) they are high-resolution."""
    if width <= 0 or height <= 0:
        raise ValueError("native resolution must be positive")
    return "low" if float(width) * float(height) < RESOLUTION_AREA_THRESHOLD else "high"


def resolution_groups(specs: list[tuple[str, float, float]]) -> dict[str, str]:
    """Map dataset id -> 'low'/'high' from (id, native W, native H) entries."""
    return {ds_id: resolution_group(w, h) for ds_id, w, h in specs}


@dataclass
class CrossDatasetReport:
    reports: list[EvalReport]
    m_miou: float
    m_macc: float
    resolution_means: dict[str, dict] = field(default_factory=dict)


def cross_dataset_report(
    reports: list[EvalReport], groups: dict[str, str] | None = None
) -> CrossDatasetReport:
    """Unweighted means of the per-dataset mIoU/mACC, optionally also per
    resolution group."""
    if not reports:
        raise ValueError("need at least one dataset report")
    out = CrossDatasetReport(
        reports=list(reports),
        m_miou=_mean([r.miou for r in reports]),
        m_macc=_mean([r.macc for r in reports]),
    )
    if groups:
        for group in ("low", "high"):
            members = [r for r in reports if groups.get(r.dataset_id) == group]
            if members:
                out.resolution_means[group] = {
                    "datasets": [r.dataset_id for r in members],
                    "m_miou": _mean([r.miou for r in members]),
                    "m_macc": _mean([r.macc for r in members]),
                }
    return out


# ---------------------------------------------------------------------------
# rendering


def _pct(value: float | None) -> str:
    return "  --  " if value is None else f"{100.0 * value:6.2f}"


def render_table(report: EvalReport) -> str:
    width = max([len("class")] + [len(s.name) for s in report.classes])
    lines = [f"dataset: {report.dataset_id}"]
    lines.append(f"{'class':<{width}}  {'IoU':>6}  {'ACC':>6}")
    for s in report.classes:
        if not s.present:
            lines.append(f"{s.name:<{width}}  absent")
            continue
        lines.append(f"{s.name:<{width}}  {_pct(s.iou)}  {_pct(s.acc)}")
    lines.append(f"{'mean':<{width}}  {_pct(report.miou)}  {_pct(report.macc)}")
    if report.split is not None:
        sp = report.split
        lines.append(f"{'overall':<{width}}  {_pct(sp.overall_miou)}  {_pct(sp.overall_macc)}")
        lines.append(f"{'seen':<{width}}  {_pct(sp.seen_miou)}  {_pct(sp.seen_macc)}")
        lines.append(f"{'unseen':<{width}}  {_pct(sp.unseen_miou)}  {_pct(sp.unseen_macc)}")
    return "\n".join(lines) + "\n"


def report_to_dict(report: EvalReport) -> dict:
    data = {
        "dataset_id": report.dataset_id,
        "miou": report.miou,
        "macc": report.macc,
        "per_class": [
            {
                "name": s.name,
                "iou": s.iou,
                "acc": s.acc,
                "gt_pixels": s.gt_pixels,
                "pred_pixels": s.pred_pixels,
                "present": s.present,
            }
            for s in report.classes
        ],
    }
    if report.native_resolution is not None:
        data["native_resolution"] = list(report.native_resolution)
    if report.split is not None:
        sp = report.split
        data["split"] = {
            "seen": list(sp.seen),
            "unseen": list(sp.unseen),
            "overall": {"miou": sp.overall_miou, "macc": sp.overall_macc},
            "seen_means": {"miou": sp.seen_miou, "macc": sp.seen_macc},
            "unseen_means": {"miou": sp.unseen_miou, "macc": sp.unseen_macc},
        }
    return data


def cross_report_to_dict(cross: CrossDatasetReport) -> dict:
    return {
        "m_miou": cross.m_miou,
        "m_macc": cross.m_macc,
        "datasets": [report_to_dict(r) for r in cross.reports],
        "resolution_groups": cross.resolution_means,
    }


def report_to_json(report: EvalReport) -> str:
    return json.dumps(report_to_dict(report), indent=2) + "\n"
