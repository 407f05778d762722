"""Segmentation and feature-space evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction and truth sizes differ: {pred.shape} vs {truth.shape}")
    idx = truth.astype(np.int64) * num_classes + pred.astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class never occurs in truth or prediction."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    union = cm.sum(0) + cm.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)


def miou(cm: np.ndarray) -> float:
    if np.asarray(cm).sum() == 0:
        raise ValueError("confusion matrix is empty")
    iou = per_class_iou(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("no class has a non-zero union")
    return float(np.nanmean(iou))


@dataclass(frozen=True)
class LabelQuality:
    precision: float     # NaN when no pixel is valid
    recall: float
    coverage: float


def pseudo_label_quality(labels: np.ndarray, valid: np.ndarray, truth: np.ndarray) -> LabelQuality:
    labels, valid, truth = np.asarray(labels), np.asarray(valid, dtype=bool), np.asarray(truth)
    if not (labels.shape == valid.shape == truth.shape):
        raise ValueError(f"shape mismatch: {labels.shape}, {valid.shape}, {truth.shape}")
    total = labels.size
    n_valid = int(valid.sum())
    correct = int((valid & (labels == truth)).sum())
    precision = correct / n_valid if n_valid else math.nan
    return LabelQuality(precision, correct / total, n_valid / total)


@dataclass(frozen=True)
class DiscriminationStats:
    intra_trace: float
    inter_trace: float

    @property
    def ratio(self) -> float:
        if self.intra_trace <= 0:
            raise ValueError("inter/intra ratio undefined: intra-class trace is zero")
        return self.inter_trace / self.intra_trace

    def ratio_or_nan(self) -> float:
        return self.inter_trace / self.intra_trace if self.intra_trace > 0 else math.nan


def discrimination(features: np.ndarray, class_ids: np.ndarray) -> DiscriminationStats:
    """LDA-style scatter traces.

    intra: mean over classes of the trace of each class's sample covariance.
    inter: count-weighted trace of the scatter of class means around the
    global mean.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(class_ids).reshape(-1)
    x = x.reshape(len(y), -1)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    mu = x.mean(axis=0)
    intra, inter = [], 0.0
    for c in classes:
        xc = x[y == c]
        mc = xc.mean(axis=0)
        inter += len(xc) * float(((mc - mu) ** 2).sum())
        if len(xc) < 2:
            log.warning("class %d has a single sample; skipped for intra-class scatter", c)
            continue
        intra.append(float(((xc - mc) ** 2).sum() / (len(xc) - 1)))
    if not intra:
        raise ValueError("every class is a singleton")
    return DiscriminationStats(float(np.mean(intra)), inter / len(y))


def sample_per_class(features: np.ndarray, labels: np.ndarray, per_class: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """At most ``per_class`` random pixels of each class, as (rows, class ids)."""
    flat = features.reshape(-1, features.shape[-1])
    lab = labels.reshape(-1)
    xs, ys = [], []
    for c in np.unique(lab):
        idx = np.flatnonzero(lab == c)
        if idx.size > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        xs.append(flat[idx])
        ys.append(np.full(idx.size, c))
    return np.concatenate(xs), np.concatenate(ys)
