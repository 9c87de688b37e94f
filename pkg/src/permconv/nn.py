"""A small trainable layer stack: bilateral and spatial convolutions, ReLU,
losses and SGD with momentum, plus the tiles segmentation harness."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import backward_kernel, backward_signal, forward
from .filterops import (
    BlurMatrix,
    PermutohedralKernel,
    build_blur_matrix,
    gaussian_kernel,
)
from .apps.metrics import iou
from .lattice import FeatureSet, LatticeIndex, build_index, filter_size

log = logging.getLogger(__name__)

__all__ = [
    "BclLattice",
    "bcl_lattice",
    "Layer",
    "BCL",
    "SpatialConv",
    "ReLU",
    "Sequential",
    "softmax",
    "softmax_log_loss",
    "mse_loss",
    "SGD",
    "TilesConfig",
    "TilesResult",
    "make_tiles",
    "tiles_features",
    "build_tiles_net",
    "train_tiles",
    "iou",
]


@dataclass(frozen=True)
class BclLattice:
    """Lattice and gather table shared by every BCL that filters one input."""

    index: LatticeIndex
    blur: BlurMatrix

    @property
    def density(self) -> float:
        """Average number of input points per populated lattice point."""
        return self.index.n / self.index.m


def bcl_lattice(features: FeatureSet, s: int) -> BclLattice:
    index = build_index(features)
    return BclLattice(index, build_blur_matrix(index, s))


class Layer:
    """Base layer: ``params`` and ``grads`` are dicts of same-shaped arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, ctx=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


class BCL(Layer):
    """Bilateral convolution layer: slice(B * splat(x)) + bias.

    ``ctx`` must carry the :class:`BclLattice` of the current input.  The
    output is divided by the lattice's mean density, a per-input constant
    that keeps activations O(1) without discarding relative density.
    """

    def __init__(self, d: int, s: int, c_in: int, c_out: int, rng=None, init: str = "uniform",
                 bias: bool = True, density_scale: bool = True):
        super().__init__()
        self.d, self.s = d, s
        t = filter_size(d, s)
        if init == "gauss":
            w = gaussian_kernel(d, s, 1).weights[0, 0]
            weights = np.zeros((c_out, c_in, t))
            weights[:, :, :] = w / max(c_in, 1)
        elif init == "zero":
            weights = np.zeros((c_out, c_in, t))
        else:
            rng = np.random.default_rng() if rng is None else rng
            bound = np.sqrt(1.0 / (c_in * t))
            weights = rng.uniform(-bound, bound, size=(c_out, c_in, t))
        self.params["weights"] = weights
        if bias:
            self.params["bias"] = np.zeros(c_out)
        self.density_scale = density_scale
        self.zero_grad()
        self._cache = None

    @property
    def kernel(self) -> PermutohedralKernel:
        return PermutohedralKernel(self.d, self.s, self.params["weights"])

    def forward(self, x, ctx=None):
        lat = ctx if isinstance(ctx, BclLattice) else getattr(ctx, "lattice", None)
        if lat is None:
            raise ValueError("BCL.forward needs the input's BclLattice as ctx")
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        out, tape = forward(lat.index, lat.index, flat, self.kernel, lat.blur)
        scale = 1.0 / lat.density if self.density_scale else 1.0
        out = out * scale
        if "bias" in self.params:
            out = out + self.params["bias"]
        self._cache = (tape, scale, shape)
        return out.reshape(shape[:-1] + (out.shape[-1],))

    def backward(self, grad):
        tape, scale, shape = self._cache
        g = grad.reshape(-1, grad.shape[-1])
        if "bias" in self.params:
            self.grads["bias"] += g.sum(axis=0)
        g = g * scale
        self.grads["weights"] += backward_kernel(tape, g)
        return backward_signal(tape, g).reshape(shape)


class SpatialConv(Layer):
    """Stride-1 'same' convolution on H x W x C arrays (odd kernel size)."""

    def __init__(self, c_in: int, c_out: int, k: int, rng=None, bias: bool = True,
                 dtype=np.float64):
        super().__init__()
        if k % 2 != 1:
            raise ValueError("kernel size must be odd")
        rng = np.random.default_rng() if rng is None else rng
        bound = np.sqrt(1.0 / (c_in * k * k))
        self.k = k
        w = rng.uniform(-bound, bound, size=(k, k, c_in, c_out))
        self.params["weights"] = w.astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()
        self._cols = None

    @staticmethod
    def _im2col(x, k):
        p = k // 2
        xp = np.pad(x, ((p, p), (p, p), (0, 0)))
        win = sliding_window_view(xp, (k, k), axis=(0, 1))  # H, W, C, k, k
        H, W, C = x.shape
        return win.transpose(0, 1, 3, 4, 2).reshape(H * W, k * k * C)

    def forward(self, x, ctx=None):
        if x.ndim != 3 or x.shape[2] != self.params["weights"].shape[2]:
            raise ValueError(f"expected H x W x {self.params['weights'].shape[2]}, got {x.shape}")
        H, W, _ = x.shape
        cols = self._im2col(x, self.k)
        w = self.params["weights"]
        out = cols @ w.reshape(-1, w.shape[3])
        if "bias" in self.params:
            out += self.params["bias"]
        self._cols = cols
        self._shape = x.shape
        return out.reshape(H, W, -1)

    def backward(self, grad):
        H, W, C = self._shape
        w = self.params["weights"]
        g = grad.reshape(H * W, -1)
        self.grads["weights"] += (self._cols.T @ g).reshape(w.shape)
        if "bias" in self.params:
            self.grads["bias"] += g.sum(axis=0)
        # full correlation with the flipped, channel-swapped kernel
        wf = w[::-1, ::-1].transpose(0, 1, 3, 2)
        cols = self._im2col(grad, self.k)
        return (cols @ wf.reshape(-1, C)).reshape(H, W, C)


class ReLU(Layer):
    def forward(self, x, ctx=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._mask, grad, 0.0)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, ctx=None):
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def parameters(self):
        """(layer, name) pairs for every trainable array."""
        return [(layer, k) for layer in self.layers for k in layer.params]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_log_loss(logits: np.ndarray, labels: np.ndarray, weights=None):
    """Mean multinomial logistic loss over pixels and its gradient w.r.t. logits.

    ``weights`` optionally gives a per-class weight (class-weighted loss).
    """
    flat = logits.reshape(-1, logits.shape[-1])
    lab = np.asarray(labels).reshape(-1)
    if lab.shape[0] != flat.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {flat.shape[0]} logit rows")
    if lab.min() < 0 or lab.max() >= flat.shape[1]:
        raise ValueError("label out of range")
    p = softmax(flat)
    rows = np.arange(flat.shape[0])
    w = np.ones(flat.shape[0]) if weights is None else np.asarray(weights)[lab]
    norm = w.sum()
    loss = -np.sum(w * np.log(np.maximum(p[rows, lab], 1e-300))) / norm
    grad = p.copy()
    grad[rows, lab] -= 1.0
    grad *= (w / norm)[:, None]
    return loss, grad.reshape(logits.shape)


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over elements of (pred - target)^2 and its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    r = pred - target
    return float(np.mean(r * r)), 2.0 * r / r.size


class SGD:
    """v <- momentum v - lr (g + weight_decay p);  p <- p + v."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(layer.params[k]) for layer, k in self.params]

    def step(self, scale: float = 1.0):
        """Apply one update; ``scale`` multiplies the accumulated gradients."""
        for v, (layer, k) in zip(self.velocity, self.params):
            p = layer.params[k]
            g = layer.grads[k] * scale
            v *= self.momentum
            v -= self.lr * (g + self.weight_decay * p)
            p += v


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], velocity: list[np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0005):
    """Functional form of one momentum SGD update, in place."""
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("parameter, gradient and velocity shapes must match")
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v


@dataclass
class TilesConfig:
    variant: str = "bnn"              # "bnn", "cnn" or "pixel"
    kernel_size: int = 9              # spatial filter size for the cnn variant
    n_train: int = 1000
    n_val: int = 200
    n_test: int = 200
    size: int = 64
    tile: int = 20
    noise: float = 0.02
    filters: tuple = (32, 16, 2)
    s: int = 1
    position_scale: float = 0.05      # un-normalized pixel positions
    color_scale: float = 0.04         # colors on a 0..255 range
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch: int = 100
    epochs: int = 30
    seed: int = 0
    stop_iou: float | None = None     # stop once validation IoU reaches this
    dtype: str = "float64"            # arithmetic of the spatial-conv variants

    def validate(self):
        if self.variant not in ("bnn", "cnn", "pixel"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if not (0 < self.tile < self.size - 1):
            raise ValueError("tile must fit strictly inside the canvas")
        if self.batch < 1 or self.epochs < 0 or self.n_train < 1 or self.n_val < 1:
            raise ValueError("batch, epochs and dataset sizes must be positive")
        if self.variant == "cnn" and self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")


@dataclass
class TilesResult:
    config: TilesConfig
    train_loss: list = field(default_factory=list)
    val_iou: list = field(default_factory=list)
    test_iou: float = float("nan")
    n_params: int = 0
    seconds: float = 0.0

    def epochs_to(self, threshold: float) -> int | None:
        """First epoch (1-based) whose validation IoU reaches ``threshold``."""
        for e, v in enumerate(self.val_iou, start=1):
            if v >= threshold:
                return e
        return None


def make_tiles(n: int, rng: np.random.Generator, size: int = 64, tile: int = 20,
               noise: float = 0.02):
    """Randomly colored tile on a randomly colored background.

    Returns ``(images, labels)`` of shapes (n, size, size, 3) and
    (n, size, size); the tile lies strictly inside the canvas.
    """
    images = np.empty((n, size, size, 3))
    labels = np.zeros((n, size, size), dtype=np.int64)
    for i in range(n):
        bg, fg = rng.uniform(0.0, 1.0, size=(2, 3))
        r, c = rng.integers(1, size - tile, size=2)
        images[i] = bg
        images[i, r:r + tile, c:c + tile] = fg
        labels[i, r:r + tile, c:c + tile] = 1
        images[i] += rng.normal(0.0, noise, size=(size, size, 3))
    np.clip(images, 0.0, 1.0, out=images)
    return images, labels


def tiles_features(image: np.ndarray, position_scale: float, color_scale: float) -> FeatureSet:
    """(x, y, r, g, b) per pixel, colors taken on a 0..255 range."""
    H, W, _ = image.shape
    yy, xx = np.mgrid[:H, :W]
    pts = np.column_stack([xx.ravel(), yy.ravel(), 255.0 * image.reshape(-1, 3)])
    scales = np.array([position_scale] * 2 + [color_scale] * 3)
    return FeatureSet(pts, scales)


def build_tiles_net(cfg: TilesConfig, rng: np.random.Generator) -> Sequential:
    f1, f2, f3 = cfg.filters
    if cfg.variant == "bnn":
        conv = lambda ci, co: BCL(5, cfg.s, ci, co, rng)  # noqa: E731
    elif cfg.variant == "cnn":
        conv = lambda ci, co: SpatialConv(ci, co, cfg.kernel_size, rng, dtype=cfg.dtype)  # noqa: E731
    else:
        conv = lambda ci, co: SpatialConv(ci, co, 1, rng, dtype=cfg.dtype)  # noqa: E731
    return Sequential([conv(3, f1), ReLU(), conv(f1, f2), ReLU(), conv(f2, f3)])


class _LatticeCache:
    """Per-image lattices keyed by (split, image id); features never change."""

    def __init__(self, cfg: TilesConfig):
        self.cfg = cfg
        self._store: dict[tuple, BclLattice] = {}

    def get(self, key, image):
        lat = self._store.get(key)
        if lat is None:
            fs = tiles_features(image, self.cfg.position_scale, self.cfg.color_scale)
            lat = bcl_lattice(fs, self.cfg.s)
            self._store[key] = lat
        return lat


def _predict(net, images, cache, split, variant):
    preds = []
    for i, img in enumerate(images):
        ctx = cache.get((split, i), img) if variant == "bnn" else None
        preds.append(net.forward(img, ctx).argmax(axis=-1))
    return np.array(preds)


def train_tiles(cfg: TilesConfig, progress=None) -> TilesResult:
    """Train one tiles network and record per-epoch validation IoU.

    Each image contributes its mean pixel loss; gradients are averaged
    over a batch before one SGD step.  ``progress(epoch, loss, iou)`` is
    called after every epoch.
    """
    cfg.validate()
    t0 = time.perf_counter()
    data_rng = np.random.default_rng(cfg.seed)
    xtr, ytr = make_tiles(cfg.n_train, data_rng, cfg.size, cfg.tile, cfg.noise)
    xva, yva = make_tiles(cfg.n_val, data_rng, cfg.size, cfg.tile, cfg.noise)
    xte, yte = make_tiles(cfg.n_test, data_rng, cfg.size, cfg.tile, cfg.noise)
    if cfg.variant != "bnn":
        xtr, xva, xte = (a.astype(cfg.dtype) for a in (xtr, xva, xte))
    rng = np.random.default_rng(cfg.seed + 1)
    net = build_tiles_net(cfg, rng)
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    cache = _LatticeCache(cfg)
    result = TilesResult(cfg, n_params=net.n_params())

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(cfg.n_train)
        losses = []
        for start in range(0, cfg.n_train, cfg.batch):
            batch = order[start:start + cfg.batch]
            net.zero_grad()
            for i in batch:
                ctx = cache.get(("train", int(i)), xtr[i]) if cfg.variant == "bnn" else None
                logits = net.forward(xtr[i], ctx)
                loss, g = softmax_log_loss(logits, ytr[i])
                net.backward(g.astype(logits.dtype, copy=False))
                losses.append(loss)
            opt.step(1.0 / len(batch))
        pred = _predict(net, xva, cache, "val", cfg.variant)
        val = iou(pred, yva)
        result.train_loss.append(float(np.mean(losses)))
        result.val_iou.append(val)
        log.info("tiles %s epoch %d loss %.4f val IoU %.4f", cfg.variant, epoch, losses[-1], val)
        if progress is not None:
            progress(epoch, result.train_loss[-1], val)
        if cfg.stop_iou is not None and val >= cfg.stop_iou:
            break

    result.test_iou = iou(_predict(net, xte, cache, "test", cfg.variant), yte)
    result.seconds = time.perf_counter() - t0
    return result
