"""Confusion matrices, per-class IoU, mIoU / mIoU* and pseudo-label quality.

UNDEFINED entries are NaN in arrays and ``null`` in JSON.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from idpl.datamodel import IGNORE, PseudoLabelMap, ShapeError, ValidationError

# Published reference numbers (ResNet-101 backbone); not reproducible at desk scale.
REFERENCE_RESULTS = {
    "gta5_to_cityscapes": {
        "classes": ("road", "sidewalk", "building", "wall", "fence", "pole", "light", "sign",
                    "veg", "terrain", "sky", "person", "rider", "car", "truck", "bus",
                    "train", "mbike", "bike"),
        "iou": (93.4, 55.6, 85.3, 39.2, 40.3, 40.1, 41.7, 41.2, 87.0, 42.3, 87.8, 67.8,
                33.1, 85.1, 42.2, 52.2, 22.8, 33.1, 40.6),
        "miou": 54.2,
    },
    "synthia_to_cityscapes": {
        "classes": ("road", "sidewalk", "building", "wall", "fence", "pole", "light", "sign",
                    "veg", "sky", "person", "rider", "car", "bus", "mbike", "bike"),
        "iou": (85.1, 42.2, 83.6, 22.7, 3.8, 37.9, 30.7, 34.6, 80.3, 85.5, 62.1, 35.2,
                85.4, 41.1, 38.6, 51.5),
        "miou": 51.3,
        # mIoU* drops the starred classes wall, fence, pole
        "star_excluded": ("wall", "fence", "pole"),
        "miou_star": 58.1,
    },
}


@dataclass
class ConfusionMatrix:
    num_classes: int
    counts: np.ndarray = None
    ignored: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts,
                               self.ignored + other.ignored)


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    """Add one prediction/ground-truth pair; IGNORE ground truth is excluded."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    C = cm.num_classes
    valid = truth != IGNORE
    t, p = truth[valid].astype(np.int64), pred[valid].astype(np.int64)
    if t.size and (t.max() >= C or t.min() < 0):
        raise ValidationError("ground-truth label out of range")
    if p.size and (p.max() >= C or p.min() < 0):
        raise ValidationError("predicted label out of range")
    cm.counts += np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    cm.ignored += int((~valid).sum())
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(0) + cm.counts.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def mean_iou(iou, subset: Sequence[int] | None = None) -> float:
    """Mean over defined entries, optionally restricted to ``subset`` (mIoU*)."""
    iou = np.asarray(iou, dtype=np.float64)
    if subset is not None:
        iou = iou[list(subset)]
    defined = iou[~np.isnan(iou)]
    return float(defined.mean()) if defined.size else float("nan")


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / max(cm.total, 1))


@dataclass
class PseudoQuality:
    """Running per-class counts for pseudo labels against hidden ground truth."""

    num_classes: int
    labeled: np.ndarray = field(default=None)   # pixels pseudo-labelled c
    correct: np.ndarray = field(default=None)   # ... of which truly c
    truth: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("labeled", "correct", "truth"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_classes, dtype=np.int64))

    def add(self, pseudo, truth) -> "PseudoQuality":
        labels = pseudo.labels if isinstance(pseudo, PseudoLabelMap) else np.asarray(pseudo)
        truth = np.asarray(truth)
        if labels.shape != truth.shape:
            raise ShapeError("pseudo labels and truth differ in shape")
        C = self.num_classes
        valid = truth != IGNORE
        lab = labels[valid]
        tru = truth[valid]
        has = lab != IGNORE
        self.labeled += np.bincount(lab[has], minlength=C)[:C]
        self.correct += np.bincount(lab[has & (lab == tru)], minlength=C)[:C]
        self.truth += np.bincount(tru, minlength=C)[:C]
        return self

    def precision(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.labeled > 0, self.correct / np.maximum(self.labeled, 1), np.nan)

    def coverage(self) -> np.ndarray:
        """Pixels pseudo-labelled c over ground-truth pixels of c (can exceed 1)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.truth > 0, self.labeled / np.maximum(self.truth, 1), np.nan)

    def pooled(self, classes: Sequence[int]) -> tuple[float, float]:
        """(precision, coverage) pooled over the pixel counts of ``classes``."""
        idx = list(classes)
        lab, cor, tru = self.labeled[idx].sum(), self.correct[idx].sum(), self.truth[idx].sum()
        prec = cor / lab if lab else float("nan")
        cov = lab / tru if tru else float("nan")
        return float(prec), float(cov)


def pseudo_label_quality(pseudo, truth, num_classes: int):
    q = PseudoQuality(num_classes).add(pseudo, truth)
    return q.precision(), q.coverage()


def _nan_to_none(values):
    return [None if (v is None or np.isnan(v)) else round(float(v), 10) for v in values]


def metrics_dict(cm: ConfusionMatrix, class_names: Sequence[str],
                 star_subset: Sequence[int] | None = None) -> dict:
    iou = iou_per_class(cm)
    out = {
        "classes": list(class_names),
        "iou": _nan_to_none(iou),
        "miou": _nan_to_none([mean_iou(iou)])[0],
        "pixel_accuracy": round(pixel_accuracy(cm), 10),
        "pixels": cm.total,
        "ignored": cm.ignored,
    }
    if star_subset is not None:
        out["miou_star"] = _nan_to_none([mean_iou(iou, star_subset)])[0]
        out["star_classes"] = [class_names[i] for i in star_subset]
    return out


def dumps_metrics(metrics: dict) -> str:
    return json.dumps(metrics, indent=2, sort_keys=True) + "\n"


def metrics_csv(rows: Sequence[tuple[str, dict]], class_names: Sequence[str]) -> str:
    """Method, per-class IoU (%) in class order, mIoU [, mIoU*] - one row per method."""
    star = any("miou_star" in m for _, m in rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Method", *class_names, "mIoU"] + (["mIoU*"] if star else []))

    def pct(v):
        return "" if v is None else f"{100.0 * v:.1f}"

    for name, m in rows:
        row = [name, *[pct(v) for v in m["iou"]], pct(m["miou"])]
        if star:
            row.append(pct(m.get("miou_star")))
        writer.writerow(row)
    return buf.getvalue()
