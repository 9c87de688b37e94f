"""Color every pixel by the lattice simplex that contains its features."""

from __future__ import annotations

import numpy as np

from ..lattice import FeatureSet, elevate, find_simplex, hash_keys

FEATURE_SETS = ("xy", "rgb", "xyrgb")


def image_features(img: np.ndarray, which: str, scale: float) -> FeatureSet:
    """Features for ``which`` in {xy, rgb, xyrgb}; positions in pixels, colors on [0, 1]."""
    if which not in FEATURE_SETS:
        raise ValueError(f"features must be one of {FEATURE_SETS}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w = img.shape[:2]
    yy, xx = np.mgrid[:h, :w]
    parts = []
    if "xy" in which:
        parts.append(np.column_stack([xx.ravel(), yy.ravel()]).astype(np.float64))
    if "rgb" in which:
        parts.append(img.reshape(-1, 3))
    pts = np.hstack(parts)
    return FeatureSet(pts, np.full(pts.shape[1], scale))


def simplex_ids(fs: FeatureSet) -> np.ndarray:
    """64-bit identity of each point's simplex (hash over its sorted corner keys)."""
    keys, _ = find_simplex(elevate(fs.points, fs.scales))
    # corner k has remainder k, so the corner order is already canonical
    n, dp1, _ = keys.shape
    per_corner = hash_keys(keys.reshape(n * dp1, dp1)).reshape(n, dp1)
    h = np.zeros(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in range(dp1):
            h = (h * np.uint64(0x100000001B3)) ^ per_corner[:, k]
    return h


def lattice_viz(img: np.ndarray, which: str = "xyrgb", scale: float = 0.05) -> np.ndarray:
    """H x W x 3 image in [0, 1]; pixels sharing a simplex share a color."""
    fs = image_features(img, which, scale)
    ids = simplex_ids(fs)
    rgb = np.stack([(ids >> np.uint64(s)) & np.uint64(0xFF) for s in (8, 24, 40)], axis=1)
    h, w = np.asarray(img).shape[:2]
    return rgb.astype(np.float64).reshape(h, w, 3) / 255.0
