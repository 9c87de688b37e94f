"""Synthetic-unary dense CRF benchmark: unaries, Gaussian MF, learned and loose MF."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..crf import (
    MeanFieldModel,
    make_crf_benchmark,
    mf_inference,
    mf_train,
    pairwise_term,
    pixel_accuracy,
    potts,
)
from ..filterops import gaussian_kernel
from ..lattice import FeatureSet
from ..nn import tiles_features


@dataclass
class CrfConfig:
    n_train: int = 10
    n_test: int = 10
    size: int = 32
    tile: int = 12
    steps: int = 2
    position_scale: float = 0.1        # 5-D kernel, pixel units
    color_scale: float = 0.04          # 5-D kernel, colors on 0..255
    spatial_scale: float = 0.3         # 2-D kernel
    appearance_weight: float = 10.0    # Gaussian baseline weights
    smoothness_weight: float = 3.0
    lr: float = 0.01
    epochs: int = 10
    loose_epochs: int = 10
    unary_noise: float = 2.0
    flip_fraction: float = 0.1


@dataclass
class CrfResult:
    seed: int
    unary: float
    gauss: float
    learned: float
    loose: float
    train_curve: list = field(default_factory=list)
    loose_curve: list = field(default_factory=list)
    max_row_sum_error: float = 0.0     # max |sum q - 1| over every iterate seen
    min_entry: float = 0.0
    seconds: float = 0.0


log = logging.getLogger(__name__)


def _terms(img, cfg: CrfConfig):
    f5 = tiles_features(img, cfg.position_scale, cfg.color_scale)
    f2 = FeatureSet(f5.points[:, :2], np.full(2, cfg.spatial_scale))
    return [pairwise_term(f5, 1), pairwise_term(f2, 1)]


def gaussian_banks(cfg: CrfConfig):
    g5 = gaussian_kernel(5, 1).weights[0, 0]
    g2 = gaussian_kernel(2, 1).weights[0, 0]
    return [[cfg.appearance_weight * g5], [cfg.smoothness_weight * g2]]


class _Tracker:
    def __init__(self):
        self.row_err = 0.0
        self.min_entry = np.inf

    def check(self, qs):
        for q in qs:
            self.row_err = max(self.row_err, float(np.max(np.abs(q.sum(axis=1) - 1.0))))
            self.min_entry = min(self.min_entry, float(q.min()))


def _accuracy(models, labels, tracker):
    accs = []
    for m, lab in zip(models, labels):
        hist = []
        q = mf_inference(m, history=hist)
        tracker.check(hist)
        accs.append(pixel_accuracy(q, lab))
    return float(np.mean(accs))


def run_crf_benchmark(seed: int, cfg: CrfConfig | None = None) -> CrfResult:
    """Unary-only, Gaussian 2-step MF, learned tied MF and loose MF accuracies on held-out images.

    The loose banks start from the trained tied kernels.
    """
    cfg = CrfConfig() if cfg is None else cfg
    t0 = time.perf_counter()
    n = cfg.n_train + cfg.n_test
    bench = make_crf_benchmark(n, seed, cfg.size, cfg.tile, unary_noise=cfg.unary_noise,
                               flip_fraction=cfg.flip_fraction)
    terms = [_terms(bench.images[i], cfg) for i in range(n)]
    labels = [bench.labels[i].reshape(-1) for i in range(n)]
    mu = potts(2)
    banks = gaussian_banks(cfg)

    def build(bk, loose):
        return [MeanFieldModel(bench.unaries[i], mu, terms[i], bk, cfg.steps, loose) for i in range(n)]

    tracker = _Tracker()
    models = build(banks, False)
    test = slice(cfg.n_train, n)
    unary = float(np.mean([pixel_accuracy(m.init(), l) for m, l in zip(models[test], labels[test])]))
    gauss = _accuracy(models[test], labels[test], tracker)

    rng = np.random.default_rng(seed)
    learned_banks = [[w.copy() for w in b] for b in banks]
    models = build(learned_banks, False)
    curve = mf_train(models[:cfg.n_train], labels[:cfg.n_train], lr=cfg.lr, epochs=cfg.epochs, rng=rng)
    learned = _accuracy(models[test], labels[test], tracker)

    loose_banks = [[b[0].copy() for _ in range(cfg.steps)] for b in learned_banks]
    models = build(loose_banks, True)
    loose_curve = mf_train(models[:cfg.n_train], labels[:cfg.n_train], lr=cfg.lr,
                           epochs=cfg.loose_epochs, rng=rng)
    loose = _accuracy(models[test], labels[test], tracker)
    res = CrfResult(seed, unary, gauss, learned, loose, curve, loose_curve,
                    tracker.row_err, tracker.min_entry, time.perf_counter() - t0)
    log.info("crf seed %d: unary %.4f gauss %.4f learned %.4f loose %.4f", seed, unary, gauss, learned, loose)
    return res
