"""Pixel-level evaluation: confusion counts, precision, recall, F1, IoU.

Crack pixels are a small minority, so accuracy-style metrics mislead;
everything here derives from TP/FP/FN (TN kept for completeness).
Zero-denominator conventions are explicit: an empty prediction against
an empty truth scores 1.0 on every metric (a crack-free tile predicted
crack-free is a success), while any other 0/0 term scores 0.0.

Dataset-level aggregation is either ``micro`` (pool counts over all
pixels of all images, the default) or ``per_image_mean`` (average the
per-image metric values).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, Sample, sample_arrays
from .tensor import Tensor, no_grad

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion",
    "precision",
    "recall",
    "f1_score",
    "iou",
    "evaluate_dataset",
]

AGGREGATIONS = ("micro", "per_image_mean")


@dataclass(frozen=True)
class ConfusionCounts:
    """Pixel tallies; tp+fp+fn+tn equals the number of evaluated pixels."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def confusion(pred_prob, target, threshold: float = 0.5) -> ConfusionCounts:
    """Tally TP/FP/FN/TN of (prob > threshold) against a 0/1 target."""
    p = _as_array(pred_prob)
    t = _as_array(target)
    if p.shape != t.shape:
        raise ValueError(f"confusion: shape mismatch pred {p.shape} vs target {t.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"confusion: threshold must be in (0,1), got {threshold}")
    pred = p > threshold
    truth = t > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _empty_empty(c: ConfusionCounts) -> bool:
    return c.tp + c.fp + c.fn == 0


def precision(c: ConfusionCounts) -> float:
    if _empty_empty(c):
        return 1.0
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0


def recall(c: ConfusionCounts) -> float:
    if _empty_empty(c):
        return 1.0
    return c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0


def f1_score(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall."""
    if _empty_empty(c):
        return 1.0
    p, r = precision(c), recall(c)
    return 2.0 * p * r / (p + r) if p + r else 0.0


def iou(c: ConfusionCounts) -> float:
    """Intersection over union of predicted and true crack pixel sets."""
    if _empty_empty(c):
        return 1.0
    return c.tp / (c.tp + c.fp + c.fn)


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    iou: float
    counts: ConfusionCounts
    aggregation: str
    n_images: int = 0

    def to_dict(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "n_images": self.n_images,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "tn": self.counts.tn,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "iou": self.iou,
        }

    def to_text(self) -> str:
        lines = [f"{k}: {v:.6f}" if isinstance(v, float) else f"{k}: {v}" for k, v in self.to_dict().items()]
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def report_from_counts(counts: ConfusionCounts, n_images: int = 1) -> MetricsReport:
    """Micro report derived from pooled counts."""
    return MetricsReport(
        precision=precision(counts),
        recall=recall(counts),
        f1=f1_score(counts),
        iou=iou(counts),
        counts=counts,
        aggregation="micro",
        n_images=n_images,
    )


def evaluate_dataset(
    model,
    dataset: DatasetManifest | list[Sample],
    threshold: float = 0.5,
    aggregation: str = "micro",
    split: str = "test",
) -> MetricsReport:
    """Run the model over a test split and aggregate pixel metrics.

    ``micro`` pools the confusion counts over every pixel of every image
    before deriving metrics; ``per_image_mean`` averages per-image metric
    values. Counts in the report are pooled either way. Every evaluated
    sample must carry a mask.
    """
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
    if isinstance(dataset, DatasetManifest):
        samples = dataset.split(split)
    else:
        samples = list(dataset)
    if not samples:
        raise ValueError(f"no samples to evaluate in split {split!r}")

    total = ConfusionCounts()
    per_image: list[ConfusionCounts] = []
    with no_grad():
        for s in samples:
            if s.mask_path is None:
                raise ValueError(f"sample {s.image_path} has no mask; cannot evaluate")
            image, mask = sample_arrays(s)
            pred = model.forward(Tensor(image[None]))
            c = confusion(pred.data[0], mask, threshold)
            per_image.append(c)
            total = total + c

    if aggregation == "micro":
        return MetricsReport(
            precision=precision(total),
            recall=recall(total),
            f1=f1_score(total),
            iou=iou(total),
            counts=total,
            aggregation="micro",
            n_images=len(per_image),
        )
    n = len(per_image)
    return MetricsReport(
        precision=sum(precision(c) for c in per_image) / n,
        recall=sum(recall(c) for c in per_image) / n,
        f1=sum(f1_score(c) for c in per_image) / n,
        iou=sum(iou(c) for c in per_image) / n,
        counts=total,
        aggregation="per_image_mean",
        n_images=n,
    )
