"""Gray-scale denoising harness: spatial, Gaussian-bilateral and learned-bilateral filters."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .images import luma, pixel_features
from .learned import (
    FilterProblem,
    apply_filter,
    design_columns,
    filter_problem,
    fit_mean_psnr,
    gaussian_weights,
)
from .metrics import psnr

log = logging.getLogger(__name__)

SIGMA = 25.0 / 255.0
HOPS = 2  # filter_size(3, 2) = 65 weights
POSITION_GRID = (0.35, 0.5, 0.7, 1.0)
INTENSITY_GRID = (2.0, 3.0, 4.0, 6.0)
SPATIAL_SIZE = 5


def add_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise, not clipped (keeps the analytic noisy PSNR)."""
    return img + rng.normal(0.0, sigma, size=img.shape)


def bilateral_problem(noisy: np.ndarray, position_scale: float, intensity_scale: float,
                      s: int = HOPS) -> FilterProblem:
    fs = pixel_features(noisy, position_scale, intensity_scale)
    return filter_problem(fs, None, noisy.reshape(-1, 1), s)


def spatial_columns(noisy: np.ndarray, k: int = SPATIAL_SIZE) -> np.ndarray:
    """k*k x n matrix of shifted copies (edge padding), one row per filter tap."""
    p = k // 2
    padded = np.pad(noisy, p, mode="edge")
    h, w = noisy.shape
    return np.stack([padded[r:r + h, c:c + w].reshape(-1) for r in range(k) for c in range(k)])


def bilateral_columns(p: FilterProblem) -> np.ndarray:
    cols = np.empty((p.t, p.idx_out.n))
    for o, col in design_columns(p):
        cols[o] = col[:, 0]
    return cols


def _lstsq(blocks, targets, iters: int = 5):
    # same mean-PSNR objective as the bilateral fit, reweighted per image
    eqs = [(X @ X.T, X @ y, float(y @ y), y.size) for X, y in zip(blocks, targets)]
    w = np.linalg.lstsq(sum(e[0] for e in eqs), sum(e[1] for e in eqs), rcond=None)[0]
    for _ in range(iters):
        a = [1.0 / max((w @ A @ w - 2 * w @ b + yy), 1e-300) for A, b, yy, _ in eqs]
        w = np.linalg.lstsq(sum(k * e[0] for k, e in zip(a, eqs)),
                            sum(k * e[1] for k, e in zip(a, eqs)), rcond=None)[0]
    return w


@dataclass
class DenoiseResult:
    names: list
    sigma: float
    scales: tuple
    noisy: list = field(default_factory=list)
    spatial: list = field(default_factory=list)
    gauss: list = field(default_factory=list)
    learned: list = field(default_factory=list)
    both: list = field(default_factory=list)
    weights: np.ndarray | None = None
    seconds: float = 0.0

    def means(self) -> dict:
        keys = ("noisy", "spatial", "gauss", "learned", "both")
        return {k: float(np.mean(getattr(self, k))) for k in keys if getattr(self, k)}


def select_scales(train, grid_pos=POSITION_GRID, grid_int=INTENSITY_GRID):
    """Gaussian feature scales maximizing mean training PSNR."""
    g = gaussian_weights(3, HOPS)
    best = None
    for ps in grid_pos:
        for vs in grid_int:
            score = np.mean([psnr(clean.reshape(-1, 1), apply_filter(bilateral_problem(noisy, ps, vs), g))
                             for clean, noisy in train])
            log.debug("denoise scales (%.2f, %.2f): %.3f dB", ps, vs, score)
            if best is None or score > best[0]:
                best = (score, ps, vs)
    return best[1], best[2]


def run_denoising(images, sigma: float = SIGMA, seed: int = 0, scales=None,
                  methods=("spatial", "gauss", "learned", "both")) -> DenoiseResult:
    """Alternate images into train/test, fit on train, report test PSNRs.

    Feature scales for the Gaussian filter are chosen on the training
    images unless ``scales`` is given; the learned filter starts from the
    same scales.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    data = [(name, luma(img), add_noise(luma(img), sigma, rng)) for name, img in images]
    train = [(c, x) for _, c, x in data[0::2]]
    test = data[1::2]
    if not test:
        raise ValueError("need at least two images")
    scales = select_scales(train) if scales is None else tuple(scales)
    res = DenoiseResult([n for n, _, _ in test], sigma, scales)

    tr_probs = [bilateral_problem(x, *scales) for _, x in train]
    tr_y = [c.reshape(-1) for c, _ in train]
    w_bil = u_sp = w_both = None
    if "learned" in methods:
        w_bil = fit_mean_psnr(tr_probs, [y[:, None] for y in tr_y], gaussian_weights(3, HOPS))
        res.weights = w_bil
    if "spatial" in methods:
        u_sp = _lstsq([spatial_columns(x) for _, x in train], tr_y)
    if "both" in methods:
        blocks = [np.vstack([bilateral_columns(p), spatial_columns(x)]) for p, (_, x) in zip(tr_probs, train)]
        w_both = _lstsq(blocks, tr_y)

    g = gaussian_weights(3, HOPS)
    for name, clean, noisy in test:
        p = bilateral_problem(noisy, *scales)
        y = clean.reshape(-1)
        res.noisy.append(psnr(clean, noisy))
        if "gauss" in methods:
            res.gauss.append(psnr(y, apply_filter(p, g)[:, 0]))
        if w_bil is not None:
            res.learned.append(psnr(y, apply_filter(p, w_bil)[:, 0]))
        if u_sp is not None:
            res.spatial.append(psnr(y, u_sp @ spatial_columns(noisy)))
        if w_both is not None:
            res.both.append(psnr(y, w_both @ np.vstack([bilateral_columns(p), spatial_columns(noisy)])))
        log.info("denoise %s: %s", name, {k: round(v[-1], 2) for k, v in vars(res).items()
                                           if isinstance(v, list) and v and isinstance(v[-1], float)})
    res.seconds = time.perf_counter() - t0
    return res
