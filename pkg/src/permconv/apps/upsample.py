"""Joint bilateral upsampling harness: bicubic, Gaussian and learned filters."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..filterops import NORMALIZE_EPS
from .images import as_rgb, bicubic_resize, box_downsample, luma, pixel_features
from .learned import FilterProblem, apply_filter, filter_problem, fit_least_squares, gaussian_weights
from .metrics import psnr

log = logging.getLogger(__name__)

# position scale per upsampling factor; intensity scale 0.17 on 0..255 luma
POSITION_SCALES = {2: 0.13, 4: 0.06, 8: 0.03, 16: 0.02}
INTENSITY_SCALE = 0.17
INTENSITY_RANGE = 255.0
HOPS = 2
# guide pixels whose Gaussian support falls below this fraction of the
# median support take the bicubic value instead
SUPPORT_FLOOR = 1e-3


def upsample_problem(guide: np.ndarray, low: np.ndarray, factor: int,
                     position_scale: float | None = None,
                     intensity_scale: float = INTENSITY_SCALE, s: int = HOPS) -> FilterProblem:
    """Low-resolution pixels splatted at their high-resolution centers, sliced at guide pixels.

    Both sides use (x, y, luma of the guide / of the low-res image) as
    features; the RGB values of ``low`` are the filtered signal.
    """
    if position_scale is None:
        position_scale = POSITION_SCALES.get(factor, 0.24 / factor)
    low = as_rgb(low)
    gh, gw = guide.shape[:2]
    if (low.shape[0] * factor, low.shape[1] * factor) != (gh, gw):
        raise ValueError(f"low-res {low.shape[:2]} x {factor} does not match guide {guide.shape[:2]}")
    fin = pixel_features(luma(low), position_scale, intensity_scale, INTENSITY_RANGE,
                         stride=factor, offset=(factor - 1) / 2.0)
    fout = pixel_features(luma(guide), position_scale, intensity_scale, INTENSITY_RANGE)
    return filter_problem(fin, fout, low.reshape(-1, low.shape[2]), s)


def supported(p: FilterProblem) -> np.ndarray:
    """Boolean mask of output pixels with enough Gaussian support."""
    norm = p.normalizer[:, 0]
    # the stored normalizer is already clamped at the division guard
    live = norm > NORMALIZE_EPS
    if not live.any():
        return live
    return live & (norm > SUPPORT_FLOOR * np.median(norm[live]))


def joint_upsample(guide, low, factor, weights=None, problem=None, self_normalize=False,
                   **kw) -> np.ndarray:
    """Normalized joint bilateral upsampling; Gaussian weights unless given.

    Unsupported pixels (see :func:`supported`) fall back to bicubic.
    ``self_normalize`` divides by the kernel's own all-ones response
    instead of the Gaussian one.
    """
    p = upsample_problem(guide, low, factor, **kw) if problem is None else problem
    w = gaussian_weights(3, p.s) if weights is None else weights
    low = as_rgb(low)
    shape = guide.shape[:2] + (low.shape[2],)
    out = apply_filter(p, w, self_normalize).reshape(shape)
    hole = ~supported(p).reshape(shape[:2])
    if hole.any():
        out[hole] = bicubic_resize(low, shape[:2])[hole]
    return out


def crop_pairs(images, size: int):
    """Split each image into a training crop (top-left) and a test crop (bottom-right)."""
    train, test = [], []
    for name, img in images:
        img = as_rgb(img)
        h, w = img.shape[:2]
        if h < 2 * size or w < 2 * size:
            continue
        train.append((name, img[:size, :size]))
        test.append((name, img[h - size:, w - size:]))
    return train, test


@dataclass
class UpsampleResult:
    factor: int
    names: list
    bicubic: list = field(default_factory=list)
    gauss: list = field(default_factory=list)
    learned: list = field(default_factory=list)
    weights: np.ndarray | None = None
    seconds: float = 0.0

    def means(self) -> dict:
        return {k: float(np.mean(getattr(self, k))) for k in ("bicubic", "gauss", "learned")}


def train_upsampler(train, factor: int, ridge: float = 0.0) -> np.ndarray:
    probs, targets, masks = [], [], []
    for _, img in train:
        p = upsample_problem(img, box_downsample(img, factor), factor)
        probs.append(p)
        targets.append(img.reshape(-1, 3))
        masks.append(supported(p))
    return fit_least_squares(probs, targets, ridge, masks)


def evaluate_upsampler(test, factor: int, weights) -> UpsampleResult:
    res = UpsampleResult(factor, [n for n, _ in test], weights=weights)
    for name, img in test:
        low = box_downsample(img, factor)
        p = upsample_problem(img, low, factor)
        res.bicubic.append(psnr(img, bicubic_resize(low, img.shape[:2])))
        res.gauss.append(psnr(img, joint_upsample(img, low, factor, problem=p)))
        res.learned.append(psnr(img, joint_upsample(img, low, factor, weights, problem=p)))
        log.info("upsample %dx %s: bicubic %.2f gauss %.2f learned %.2f", factor, name,
                 res.bicubic[-1], res.gauss[-1], res.learned[-1])
    return res


def run_upsampling(images, factor: int = 4, size: int = 144, weights=None) -> UpsampleResult:
    """Train on the top-left crops (unless ``weights`` is given), test on the bottom-right."""
    t0 = time.perf_counter()
    train, test = crop_pairs(images, size)
    if not test:
        raise ValueError("no image is large enough for the requested crops")
    if weights is None:
        weights = train_upsampler(train, factor)
    res = evaluate_upsampler(test, factor, weights)
    res.seconds = time.perf_counter() - t0
    return res
