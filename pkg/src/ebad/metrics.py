"""Evaluation metrics: box IoU, mIoU, pixel success ratio, attack success rate."""

from __future__ import annotations

import numpy as np

Box = tuple[float, float, float, float]  # x_min, y_min, x_max, y_max, half-open


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two half-open rectangles, in [0, 1].

    Disjoint or zero-area unions give 0.
    """
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = max(0.0, a[2] - a[0]) * max(0.0, a[3] - a[1])
    area_b = max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def confusion_matrix(pred: np.ndarray, ref: np.ndarray, num_classes: int) -> np.ndarray:
    """K x K counts with rows = reference class, cols = predicted class."""
    pred = np.asarray(pred, dtype=np.int64)
    ref = np.asarray(ref, dtype=np.int64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    for name, arr in (("pred", pred), ("ref", ref)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} labels outside [0, {num_classes})")
    idx = ref.reshape(-1) * num_classes + pred.reshape(-1)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(
        num_classes, num_classes
    )


def miou(pred: np.ndarray, ref: np.ndarray, num_classes: int) -> float:
    """Mean per-class IoU in percent.

    Classes absent from both maps are excluded from the mean, which avoids
    0/0 terms; identical maps always score 100.
    """
    cm = confusion_matrix(pred, ref, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        raise ValueError("empty maps")
    return float(100.0 * (inter[present] / union[present]).mean())


def psr(pred: np.ndarray, region: np.ndarray, target_label: int) -> float:
    """Percent of region pixels predicted as the target label."""
    pred = np.asarray(pred)
    region = np.asarray(region, dtype=bool)
    if pred.shape != region.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {region.shape}")
    total = int(region.sum())
    if total == 0:
        raise ValueError("empty target region")
    return float(100.0 * (pred[region] == target_label).sum() / total)


def asr(outcomes) -> float:
    """Percent of successful attacks."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no outcomes")
    return 100.0 * sum(bool(o) for o in outcomes) / len(outcomes)
