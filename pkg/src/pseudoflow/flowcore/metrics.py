"""Flow evaluation metrics.

Flows are (H, W, 2) float arrays holding per-pixel (u, v) displacement in
pixels; validity masks are (H, W) bools. Both metrics ignore invalid
pixels entirely and refuse an all-false mask.
"""

from __future__ import annotations

import numpy as np


class EmptyMaskError(ValueError):
    """A metric was asked to average over zero valid pixels."""


def _check_pair(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape[-1] != 2 or pred.ndim != 3:
        raise ValueError(f"flow shapes disagree: {pred.shape} vs {gt.shape}")
    if mask.shape != pred.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != flow grid {pred.shape[:2]}")
    if not mask.any():
        raise EmptyMaskError("no valid pixels")
    return pred, gt, mask


def endpoint_errors(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean errors at the valid pixels, as a 1D array."""
    pred, gt, mask = _check_pair(pred, gt, mask)
    diff = pred[mask] - gt[mask]
    return np.sqrt((diff ** 2).sum(axis=-1))


def epe(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Mean end-point error over valid pixels, in pixels."""
    return float(endpoint_errors(pred, gt, mask).mean())


def f1_all(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """KITTI outlier rate, in percent.

    A valid pixel is an outlier iff its end-point error exceeds 3 px AND
    5% of the ground-truth flow magnitude.
    """
    pred, gt, mask = _check_pair(pred, gt, mask)
    err = endpoint_errors(pred, gt, mask)
    mag = np.sqrt((gt[mask] ** 2).sum(axis=-1))
    out = (err > 3.0) & (err > 0.05 * mag)
    return float(100.0 * out.mean())


def outlier_counts(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> tuple:
    """(outliers, valid) pixel counts, for pooled F1-all over a split."""
    pred, gt, mask = _check_pair(pred, gt, mask)
    err = endpoint_errors(pred, gt, mask)
    mag = np.sqrt((gt[mask] ** 2).sum(axis=-1))
    out = (err > 3.0) & (err > 0.05 * mag)
    return int(out.sum()), int(mask.sum())


__all__ = ["EmptyMaskError", "endpoint_errors", "epe", "f1_all", "outlier_counts"]
