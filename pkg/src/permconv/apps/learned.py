"""Single learned bilateral filters with a fixed Gaussian normalizer.

The filter output is ``S_slice B S_splat v / n_G`` where ``n_G`` is the
Gaussian baseline's response to the all-ones signal.  With ``n_G`` fixed the
output is linear in the scalar kernel ``B``, it equals the Gaussian
bilateral filter at initialization, and the mean squared error is a
quadratic in the weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autograd import backward_kernel, forward
from ..filterops import (
    BlurMatrix,
    PermutohedralKernel,
    build_blur_matrix,
    gaussian_kernel,
    guard_denominator,
    slice_signal,
    splat,
)
from ..lattice import FeatureSet, LatticeIndex, build_index, build_joint_index
from ..nn import SGD, Layer


@dataclass(frozen=True)
class FilterProblem:
    idx_in: LatticeIndex
    idx_out: LatticeIndex
    blur: BlurMatrix
    signal: np.ndarray        # n_in x c
    normalizer: np.ndarray    # n_out x 1

    @property
    def d(self) -> int:
        return self.idx_in.d

    @property
    def s(self) -> int:
        return self.blur.s

    @property
    def t(self) -> int:
        return self.blur.t


def filter_problem(fs_in: FeatureSet, fs_out: FeatureSet | None, signal, s: int) -> FilterProblem:
    if fs_out is None:
        idx_in = idx_out = build_index(fs_in)
    else:
        idx_in, idx_out = build_joint_index(fs_in, fs_out)
    v = np.asarray(signal, dtype=np.float64).reshape(idx_in.n, -1)
    blur = build_blur_matrix(idx_in, s)
    g = gaussian_kernel(fs_in.d, s)
    norm, _ = forward(idx_in, idx_out, np.ones((idx_in.n, 1)), g, blur)
    return FilterProblem(idx_in, idx_out, blur, v, guard_denominator(norm))


def _kernel(p: FilterProblem, w: np.ndarray) -> PermutohedralKernel:
    c = p.signal.shape[1]
    return PermutohedralKernel(p.d, p.s, np.einsum("ab,t->abt", np.eye(c), np.asarray(w)))


def apply_filter(p: FilterProblem, w: np.ndarray, self_normalize: bool = False) -> np.ndarray:
    """Filter ``p.signal`` with scalar weights ``w`` (same kernel on every channel).

    The output is divided by the Gaussian normalizer, or by the response of
    ``w`` itself to the all-ones signal when ``self_normalize`` is set.
    """
    norm = None if self_normalize else p.normalizer
    out, _ = forward(p.idx_in, p.idx_out, p.signal, _kernel(p, w), p.blur,
                     normalize=True, normalizer=norm)
    return out


def design_columns(p: FilterProblem):
    """Yield (o, n_out x c response to a unit weight at offset o)."""
    l = splat(p.idx_in, p.signal)
    l_pad = np.vstack([l, np.zeros((1, l.shape[1]))])
    K = np.where(p.blur.neighbors == BlurMatrix.MISSING, l.shape[0], p.blur.neighbors)
    for o in range(p.t):
        yield o, slice_signal(p.idx_out, l_pad[K[o]]) / p.normalizer


def normal_equations(p: FilterProblem, target: np.ndarray, mask=None):
    """(X^T X, X^T y, y^T y, count) for the least-squares fit of ``target``."""
    y = np.asarray(target, dtype=np.float64).reshape(p.idx_out.n, -1)
    cols = np.empty((p.t, y.size))
    for o, col in design_columns(p):
        cols[o] = col.reshape(-1)
    yv = y.reshape(-1)
    if mask is not None:
        keep = np.repeat(np.asarray(mask, dtype=bool).reshape(-1), y.shape[1])
        cols, yv = cols[:, keep], yv[keep]
    return cols @ cols.T, cols @ yv, float(yv @ yv), yv.size


def fit_least_squares(problems, targets, ridge: float = 0.0, masks=None) -> np.ndarray:
    """Minimize the summed squared error over all problems in closed form.

    ``masks`` optionally restricts each problem to a subset of output points.
    """
    t = problems[0].t
    A = np.zeros((t, t))
    b = np.zeros(t)
    masks = [None] * len(problems) if masks is None else masks
    for p, y, mask in zip(problems, targets, masks):
        XtX, Xty, _, _ = normal_equations(p, y, mask)
        A += XtX
        b += Xty
    A += ridge * np.trace(A) / t * np.eye(t)
    return np.linalg.lstsq(A, b, rcond=None)[0]


def fit_mean_psnr(problems, targets, w0, iters: int = 5, masks=None) -> np.ndarray:
    """Maximize the mean per-problem PSNR, i.e. minimize sum_k log MSE_k.

    Iteratively reweighted least squares: each problem's normal equations
    are weighted by 1 / MSE_k at the current weights, starting from ``w0``.
    """
    masks = [None] * len(problems) if masks is None else masks
    eqs = [normal_equations(p, y, m) for p, y, m in zip(problems, targets, masks)]
    w = np.array(w0, dtype=np.float64)
    for _ in range(iters):
        A = np.zeros((w.size, w.size))
        b = np.zeros(w.size)
        for XtX, Xty, yty, n in eqs:
            mse = (w @ XtX @ w - 2.0 * w @ Xty + yty) / n
            a = 1.0 / (max(mse, 1e-300) * n)
            A += a * XtX
            b += a * Xty
        w = np.linalg.lstsq(A, b, rcond=None)[0]
    return w


class _Weights(Layer):
    def __init__(self, w):
        super().__init__()
        self.params["w"] = np.array(w, dtype=np.float64)
        self.zero_grad()


def fit_sgd(problems, targets, w0, lr: float, epochs: int, momentum: float = 0.9,
            weight_decay: float = 0.0, batch: int = 1, rng=None, progress=None):
    """Mean-squared-error training of the scalar kernel by momentum SGD.

    Gradients come from the pipeline's reverse pass.  Returns the weights
    and the per-epoch mean loss.
    """
    holder = _Weights(w0)
    opt = SGD([(holder, "w")], lr, momentum, weight_decay)
    rng = np.random.default_rng(0) if rng is None else rng
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(problems))
        losses = []
        for start in range(0, len(order), batch):
            holder.zero_grad()
            chunk = order[start:start + batch]
            for i in chunk:
                p, y = problems[i], np.asarray(targets[i]).reshape(problems[i].idx_out.n, -1)
                kern = _kernel(p, holder.params["w"])
                out, tape = forward(p.idx_in, p.idx_out, p.signal, kern, p.blur,
                                    normalize=True, normalizer=p.normalizer)
                r = out - y
                losses.append(float(np.mean(r * r)))
                gk = backward_kernel(tape, 2.0 * r / r.size)
                holder.grads["w"] += np.einsum("aat->t", gk)
            opt.step(1.0 / len(chunk))
        curve.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch + 1, curve[-1])
    return holder.params["w"], curve


def gaussian_weights(d: int, s: int) -> np.ndarray:
    return gaussian_kernel(d, s).weights[0, 0].copy()
