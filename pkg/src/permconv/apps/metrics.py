"""Image-quality and segmentation metrics."""

from __future__ import annotations

import numpy as np

PSNR_IDENTICAL = float("inf")


def psnr(a, b, max_val: float = 1.0) -> float:
    """20 log10(max_val / RMSE); identical inputs give ``PSNR_IDENTICAL``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 20.0 * np.log10(max_val) - 10.0 * np.log10(mse)


def iou(pred, gt, cls: int = 1) -> float:
    """|pred == cls and gt == cls| / |pred == cls or gt == cls|; 1.0 if both are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a, b = pred == cls, gt == cls
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
