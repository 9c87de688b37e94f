"""Image helpers: color conversion, resampling and a local image corpus."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..lattice import FeatureSet
from .io import read_image

LUMA = np.array([0.299, 0.587, 0.114])

# scikit-image sample images used as a stand-in natural-image corpus
SAMPLE_NAMES = ("astronaut", "coffee", "chelsea", "rocket", "camera", "moon", "coins",
                "page", "text", "brick", "grass", "gravel", "hubble_deep_field", "immunohistochemistry")


def luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img @ LUMA


def as_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop {size}")
    r, c = (h - size) // 2, (w - size) // 2
    return img[r:r + size, c:c + size]


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping factor x factor blocks (sides must divide)."""
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} not divisible by {factor}")
    shape = (h // factor, factor, w // factor, factor) + img.shape[2:]
    return img.reshape(shape).mean(axis=(1, 3))


def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    # Keys cubic convolution weights for taps at offsets -1, 0, 1, 2
    x = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    ax = np.abs(x)
    near = (a + 2) * ax**3 - (a + 3) * ax**2 + 1
    far = a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """n_out x n_in Catmull-Rom interpolation matrix with clamp-to-edge, pixel centers aligned."""
    scale = n_in / n_out
    u = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(u).astype(np.int64)
    w = _cubic_weights(u - base)
    M = np.zeros((n_out, n_in))
    for k in range(4):
        idx = np.clip(base - 1 + k, 0, n_in - 1)
        np.add.at(M, (np.arange(n_out), idx), w[:, k])
    return M


def bicubic_resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Separable Catmull-Rom (a = -0.5) resampling to ``shape`` (rows, cols)."""
    img = np.asarray(img, dtype=np.float64)
    Mr = _resample_matrix(img.shape[0], shape[0])
    Mc = _resample_matrix(img.shape[1], shape[1])
    return np.einsum("ri,ij...,cj->rc...", Mr, img, Mc)


def pixel_features(img: np.ndarray, position_scale: float, value_scale: float,
                   value_range: float = 1.0, stride: float = 1.0, offset: float = 0.0) -> FeatureSet:
    """(x, y, value...) per pixel; pixel (r, c) sits at (stride c + offset, stride r + offset).

    ``value_range`` rescales values (e.g. 255 for 8-bit units) before
    ``value_scale`` is applied.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    vals = img.reshape(h * w, -1) * value_range
    yy, xx = np.mgrid[:h, :w]
    pos = np.column_stack([xx.ravel(), yy.ravel()]) * stride + offset
    scales = np.array([position_scale] * 2 + [value_scale] * vals.shape[1])
    return FeatureSet(np.hstack([pos, vals]), scales)


def load_corpus(directory=None, names=SAMPLE_NAMES, size: int | None = None,
                gray: bool = False) -> list[tuple[str, np.ndarray]]:
    """Images from a directory of PGM/PPM files, else the bundled sample images.

    Optionally center-cropped to ``size`` and converted to gray.
    """
    out = []
    if directory is not None:
        for p in sorted(Path(directory).iterdir()):
            if p.suffix.lower() in (".pgm", ".ppm", ".pnm"):
                out.append((p.stem, read_image(p)))
    else:
        from skimage import data

        for name in names:
            img = np.asarray(getattr(data, name)(), dtype=np.float64)
            if img.max() > 1.0:
                img = img / 255.0
            if img.ndim == 3:
                img = img[:, :, :3]
            out.append((name, img))
    result = []
    for name, img in out:
        if gray:
            img = luma(img)
        if size is not None:
            if min(img.shape[:2]) < size:
                continue
            img = center_crop(img, size)
        result.append((name, img))
    return result
