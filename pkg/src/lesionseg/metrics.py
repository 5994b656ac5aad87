"""Pixel-level polyp segmentation metrics.

Columns follow the usual benchmark order: Rec, Spec, Prec, Dice, IoUp, IoUb,
mIoU, Acc. Any 0/0 ratio counts as perfect agreement (1.0).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np
import torch

METRIC_NAMES = ("recall", "specificity", "precision", "dice",
                "iou_polyp", "iou_background", "mean_iou", "accuracy")
METRIC_LABELS = ("Rec", "Spec", "Prec", "Dice", "IoUp", "IoUb", "mIoU", "Acc")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def confusion_counts(pred, gt) -> ConfusionCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def compute_metrics(c: ConfusionCounts) -> Dict[str, float]:
    if c.total <= 0:
        raise ValueError("confusion counts are empty")
    iou_p = _ratio(c.tp, c.tp + c.fp + c.fn)
    iou_b = _ratio(c.tn, c.tn + c.fp + c.fn)
    return {
        "recall": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "precision": _ratio(c.tp, c.tp + c.fp),
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou_polyp": iou_p,
        "iou_background": iou_b,
        "mean_iou": (iou_p + iou_b) / 2,
        "accuracy": (c.tp + c.tn) / c.total,
    }


@dataclass
class ImageMetrics:
    id: str
    counts: ConfusionCounts
    metrics: Dict[str, float]


@dataclass
class MetricsReport:
    per_image: List[ImageMetrics]
    aggregate: Dict[str, float]
    config: Optional[dict] = None

    @classmethod
    def from_images(cls, rows: Sequence[ImageMetrics], config: Optional[dict] = None) -> "MetricsReport":
        if not rows:
            raise ValueError("cannot aggregate an empty set of images")
        agg = {k: float(np.mean([r.metrics[k] for r in rows])) for k in METRIC_NAMES}
        return cls(list(rows), agg, config)

    def __getattr__(self, name):
        if name in METRIC_NAMES:
            return self.aggregate[name]
        raise AttributeError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "tp", "fp", "tn", "fn", *METRIC_NAMES])
        for r in self.per_image:
            writer.writerow([r.id, *r.counts, *(repr(r.metrics[k]) for k in METRIC_NAMES)])
        writer.writerow(["mean", "", "", "", "", *(repr(self.aggregate[k]) for k in METRIC_NAMES)])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "aggregate": self.aggregate,
            "per_image": [{"id": r.id, "counts": r.counts._asdict(), **r.metrics} for r in self.per_image],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def summary(self, title: str = "") -> str:
        head = " ".join(f"{lab:>7}" for lab in METRIC_LABELS)
        vals = " ".join(f"{100 * self.aggregate[k]:7.2f}" for k in METRIC_NAMES)
        lines = [title] if title else []
        lines += [f"images: {len(self.per_image)}", head, vals]
        return "\n".join(lines) + "\n"


def _grid_axis(n_out: int, n_in: int, dtype):
    pos = torch.arange(n_out, dtype=torch.float64) * (n_in / n_out)
    lo = pos.floor().long().clamp(max=n_in - 1)
    hi = (lo + 1).clamp(max=n_in - 1)
    return lo, hi, (pos - lo).clamp(0, 1).to(dtype)


def upsample_logits(logits: torch.Tensor, size) -> torch.Tensor:
    """Linearly interpolate ``B x 1 x h x w`` logits up to ``size``.

    Low-resolution pixel ``r`` is placed at full-resolution position
    ``r * H / h``, the pixel the nearest-neighbour ground-truth downsampling
    reads it from. The usual centre-aligned bilinear resize would shift every
    prediction by half a low-resolution pixel relative to its training target.
    Positions past the last sample repeat the edge.
    """
    h, w = logits.shape[-2:]
    y0, y1, wy = _grid_axis(size[0], h, logits.dtype)
    x0, x1, wx = _grid_axis(size[1], w, logits.dtype)
    wy = wy[:, None]
    rows = logits[..., y0, :] * (1 - wy) + logits[..., y1, :] * wy
    return rows[..., x0] * (1 - wx) + rows[..., x1] * wx


def predict_probabilities(model, images: torch.Tensor) -> torch.Tensor:
    """Final-stage probabilities at the input size (see :func:`upsample_logits`)."""
    logits = model(images).final
    return torch.sigmoid(upsample_logits(logits, images.shape[-2:]))


@torch.no_grad()
def evaluate_dataset(model, samples, threshold: float = 0.5, batch_size: int = 8,
                     config: Optional[dict] = None) -> MetricsReport:
    """Per-image metrics of ``P1`` against each sample mask, plus their means.

    ``samples`` is a sequence of :class:`lesionseg.data.Sample`; images must
    already be at the model's input size.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    rows = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            for s in chunk:
                if s.image.shape[-2:] != s.mask.shape[-2:]:
                    raise ValueError(f"sample {s.id}: image {s.image.shape} and mask {s.mask.shape} disagree")
            images = torch.as_tensor(np.stack([s.image for s in chunk]), dtype=dtype)
            probs = predict_probabilities(model, images).numpy()
            for s, prob in zip(chunk, probs):
                counts = confusion_counts(binarize(prob, threshold), s.mask)
                rows.append(ImageMetrics(s.id, counts, compute_metrics(counts)))
    finally:
        model.train(was_training)
    return MetricsReport.from_images(rows, config)
