"""Splat, lattice convolution and slice on the permutohedral lattice."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .lattice import (
    FeatureSet,
    InvalidInputError,
    LatticeIndex,
    LatticeTable,
    build_index,
    build_joint_index,
    filter_size,
    neighbor_offsets,
    offset_hops,
)

__all__ = [
    "DEFAULT_MEMORY_BUDGET",
    "NORMALIZE_EPS",
    "MemoryBudgetError",
    "PermutohedralKernel",
    "BlurMatrix",
    "interpolation_matrix",
    "splat",
    "convolve",
    "convolve_transpose",
    "kernel_gradient",
    "slice_signal",
    "build_blur_matrix",
    "gaussian_kernel",
    "identity_kernel",
    "offset_norms",
    "negation_permutation",
    "bilateral_filter",
    "dense_grid_filter",
]

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET = 256 * 2**20
NORMALIZE_EPS = 1e-12


class MemoryBudgetError(MemoryError):
    """A requested dense buffer would exceed the configured memory budget."""


@dataclass
class PermutohedralKernel:
    """Filter weights B over the s-hop neighborhood, shape c_out x c_in x t.

    ``weights[:, :, o]`` multiplies the neighbor at ``offsets[o]``;
    offset 0 is the lattice point itself.
    """

    d: int
    s: int
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim == 1:
            self.weights = self.weights[None, None, :]
        t = filter_size(self.d, self.s)
        if self.weights.ndim != 3 or self.weights.shape[2] != t:
            raise InvalidInputError(
                f"kernel weights must be c_out x c_in x {t} for d={self.d}, s={self.s}, "
                f"got {self.weights.shape}"
            )
        if not np.all(np.isfinite(self.weights)):
            raise InvalidInputError("kernel weights must be finite")

    @property
    def t(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[0]

    @property
    def c_in(self) -> int:
        return self.weights.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return neighbor_offsets(self.d, self.s)

    def copy(self) -> "PermutohedralKernel":
        return PermutohedralKernel(self.d, self.s, self.weights.copy())


@dataclass(frozen=True)
class BlurMatrix:
    """Neighbor gather table K: ``neighbors[o, j]`` is the dense index of the
    point at ``offsets[o]`` from lattice point ``j``, or MISSING."""

    d: int
    s: int
    neighbors: np.ndarray

    MISSING = LatticeTable.MISSING

    @property
    def t(self) -> int:
        return self.neighbors.shape[0]

    @property
    def m(self) -> int:
        return self.neighbors.shape[1]


def interpolation_matrix(index: LatticeIndex) -> sp.csr_matrix:
    """Sparse n x m matrix of barycentric weights (the slice operator).

    Its transpose is the splat operator.  MISSING corners are dropped.
    """
    cached = index.__dict__.get("_interp")
    if cached is not None:
        return cached
    n, dp1 = index.corners.shape
    rows = np.repeat(np.arange(n), dp1)
    cols = index.corners.ravel()
    vals = index.weights.ravel()
    keep = cols != LatticeTable.MISSING
    mat = sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, index.m))
    mat.sum_duplicates()
    object.__setattr__(index, "_interp", mat)
    return mat


def _as_signal(signal, n: int) -> tuple[np.ndarray, bool]:
    signal = np.asarray(signal, dtype=np.float64)
    vector = signal.ndim == 1
    if vector:
        signal = signal[:, None]
    if signal.ndim != 2 or signal.shape[0] != n:
        raise InvalidInputError(f"signal must have {n} rows, got shape {signal.shape}")
    return signal, vector


def splat(index: LatticeIndex, signal) -> np.ndarray:
    """Lattice signal l_j = sum_i b_ij v_i, shape m x c."""
    v, vector = _as_signal(signal, index.n)
    out = np.asarray(interpolation_matrix(index).T @ v)
    return out[:, 0] if vector else out


def slice_signal(index_out: LatticeIndex, lattice_signal) -> np.ndarray:
    """Read a lattice signal back at the points of ``index_out``."""
    l, vector = _as_signal(lattice_signal, index_out.m)
    if index_out.misses:
        log.warning("slice: %d output corners missing from the lattice; they contribute zero",
                    index_out.misses)
    out = np.asarray(interpolation_matrix(index_out) @ l)
    return out[:, 0] if vector else out


def _parent_steps(d: int, s: int):
    """For each offset o > 0 a parent offset one hop closer and the step between them."""
    hops = offset_hops(d, s)
    offsets = neighbor_offsets(d, s)
    lookup = {tuple(h): i for i, h in enumerate(hops)}
    parents = np.zeros(len(hops), dtype=np.int64)
    steps = np.zeros_like(offsets)
    for i, h in enumerate(hops):
        top = h.max()
        if top == 0:
            continue
        parent = h - (h == top)
        parents[i] = lookup[tuple(parent)]
        steps[i] = offsets[i] - offsets[parents[i]]
    layer = hops.max(axis=1)
    return parents, steps, layer


def build_blur_matrix(index: LatticeIndex | LatticeTable, s: int,
                      memory_budget: int = DEFAULT_MEMORY_BUDGET) -> BlurMatrix:
    """Gather table K (t x m) for the s-hop neighborhood of every populated point.

    Neighbor keys at n hops are derived from the keys at n-1 hops plus one
    step, processed over column blocks of lattice points.
    """
    table = index.table if isinstance(index, LatticeIndex) else index
    d, m = table.d, table.m
    t = filter_size(d, s)
    parents, steps, layer = _parent_steps(d, s)
    order = np.argsort(layer, kind="stable")
    K = np.empty((t, m), dtype=np.int64)
    K[0] = np.arange(m)
    per_col = t * (d + 1) * 8
    block = max(1, min(m, memory_budget // max(per_col, 1)))
    for start in range(0, m, block):
        base = table.keys[start:start + block]
        keys = np.empty((t,) + base.shape, dtype=np.int64)
        keys[0] = base
        for o in order[1:]:
            keys[o] = keys[parents[o]] + steps[o]
            K[o, start:start + block] = table.lookup(keys[o])
    return BlurMatrix(d, s, K)


def _check_blur(blur: BlurMatrix | None, index_or_table, s: int, m: int) -> BlurMatrix:
    if blur is None:
        return build_blur_matrix(index_or_table, s)
    if blur.s != s or blur.m != m:
        raise InvalidInputError(f"blur matrix (s={blur.s}, m={blur.m}) does not match (s={s}, m={m})")
    return blur


def _column_block(t: int, c: int, m: int, memory_budget: int) -> int:
    return max(1, min(m, memory_budget // max(t * c * 8, 1)))


def _gather(l_pad: np.ndarray, K: np.ndarray, cols: slice) -> np.ndarray:
    # (b, t * c) rows of neighbor values, MISSING -> zero row
    idx = K[:, cols].T
    g = l_pad[idx]
    return g.reshape(g.shape[0], -1)


def _padded(l: np.ndarray) -> np.ndarray:
    return np.vstack([l, np.zeros((1, l.shape[1]))])


def convolve(index, lattice_signal, kernel: PermutohedralKernel, blur: BlurMatrix | None = None,
             memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """l'_j = sum_o B[:, :, o] l_{j + offset_o}; unpopulated neighbors contribute zero."""
    table = index.table if isinstance(index, LatticeIndex) else index
    l, vector = _as_signal(lattice_signal, table.m)
    if l.shape[1] != kernel.c_in:
        raise InvalidInputError(f"signal has {l.shape[1]} channels, kernel expects {kernel.c_in}")
    if kernel.d != table.d:
        raise InvalidInputError(f"kernel d={kernel.d} != lattice d={table.d}")
    blur = _check_blur(blur, table, kernel.s, table.m)
    K = blur.neighbors
    K = np.where(K == BlurMatrix.MISSING, table.m, K)
    W = kernel.weights.transpose(2, 1, 0).reshape(kernel.t * kernel.c_in, kernel.c_out)
    l_pad = _padded(l)
    out = np.empty((table.m, kernel.c_out))
    block = _column_block(kernel.t, kernel.c_in, table.m, memory_budget)
    for start in range(0, table.m, block):
        cols = slice(start, start + block)
        out[cols] = _gather(l_pad, K, cols) @ W
    return out[:, 0] if vector and kernel.c_out == 1 else out


def negation_permutation(d: int, s: int) -> np.ndarray:
    """perm[o] = index of -offsets[o]."""
    offsets = neighbor_offsets(d, s)
    lookup = {tuple(o): i for i, o in enumerate(offsets)}
    return np.array([lookup[tuple(-o)] for o in offsets], dtype=np.int64)


def transpose_kernel(kernel: PermutohedralKernel) -> PermutohedralKernel:
    """Kernel of the adjoint convolution: offsets negated, channels swapped."""
    perm = negation_permutation(kernel.d, kernel.s)
    return PermutohedralKernel(kernel.d, kernel.s, kernel.weights[:, :, perm].transpose(1, 0, 2))


def convolve_transpose(index, lattice_grad, kernel: PermutohedralKernel,
                       blur: BlurMatrix | None = None,
                       memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """Adjoint of :func:`convolve` with respect to the lattice signal."""
    return convolve(index, lattice_grad, transpose_kernel(kernel), blur, memory_budget)


def kernel_gradient(index, lattice_grad, lattice_signal, kernel: PermutohedralKernel,
                    blur: BlurMatrix | None = None,
                    memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """dL/dB[a, b, o] = sum_j g[j, a] l[j + offset_o, b]; shape c_out x c_in x t."""
    table = index.table if isinstance(index, LatticeIndex) else index
    g, _ = _as_signal(lattice_grad, table.m)
    l, _ = _as_signal(lattice_signal, table.m)
    blur = _check_blur(blur, table, kernel.s, table.m)
    K = np.where(blur.neighbors == BlurMatrix.MISSING, table.m, blur.neighbors)
    l_pad = _padded(l)
    acc = np.zeros((kernel.c_out, kernel.t * kernel.c_in))
    block = _column_block(kernel.t, kernel.c_in, table.m, memory_budget)
    for start in range(0, table.m, block):
        cols = slice(start, start + block)
        acc += g[cols].T @ _gather(l_pad, K, cols)
    return acc.reshape(kernel.c_out, kernel.t, kernel.c_in).transpose(0, 2, 1).copy()


def offset_norms(d: int, s: int) -> np.ndarray:
    """Length of each kernel offset in scaled-feature units.

    The elevation maps a unit step in scaled features to a step of
    sqrt(2/3)(d+1) in lattice coordinates.
    """
    offsets = neighbor_offsets(d, s).astype(np.float64)
    return np.linalg.norm(offsets, axis=1) / (np.sqrt(2.0 / 3.0) * (d + 1))


def gaussian_kernel(d: int, s: int, channels: int = 1, sigma: float = 1.0) -> PermutohedralKernel:
    """Gaussian baseline weights exp(-|o|^2 / (2 sigma^2)), normalized to sum 1,
    applied independently per channel."""
    if s < 1:
        raise ValueError("gaussian_kernel needs s >= 1")
    w = np.exp(-offset_norms(d, s) ** 2 / (2.0 * sigma**2))
    w /= w.sum()
    weights = np.zeros((channels, channels, w.size))
    weights[np.arange(channels), np.arange(channels)] = w
    return PermutohedralKernel(d, s, weights)


def identity_kernel(d: int, s: int, channels: int = 1) -> PermutohedralKernel:
    weights = np.zeros((channels, channels, filter_size(d, s)))
    weights[np.arange(channels), np.arange(channels), 0] = 1.0
    return PermutohedralKernel(d, s, weights)


def _pipeline(idx_in, idx_out, v, kernel, blur, memory_budget):
    l = splat(idx_in, v)
    lp = convolve(idx_in, l, kernel, blur, memory_budget)
    return slice_signal(idx_out, lp)


def bilateral_filter(features_in: FeatureSet, features_out: FeatureSet | None, signal,
                     kernel: PermutohedralKernel, normalize: bool = True,
                     memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """v' = S_slice B S_splat v with optional normalization by the all-ones response.

    Input and output points may differ; they then share one lattice built
    from the union of their simplex corners.
    """
    if features_out is None or features_out is features_in:
        idx_in = idx_out = build_index(features_in)
    else:
        idx_in, idx_out = build_joint_index(features_in, features_out)
    v, vector = _as_signal(signal, idx_in.n)
    blur = build_blur_matrix(idx_in, kernel.s, memory_budget)
    out = _pipeline(idx_in, idx_out, v, kernel, blur, memory_budget)
    if normalize:
        ones = np.ones((idx_in.n, kernel.c_in))
        norm = _pipeline(idx_in, idx_out, ones, kernel, blur, memory_budget)
        out = out / guard_denominator(norm)
    return out[:, 0] if vector and out.shape[1] == 1 else out


def guard_denominator(norm: np.ndarray, eps: float = NORMALIZE_EPS) -> np.ndarray:
    return np.where(np.abs(norm) < eps, eps, norm)


def dense_grid_filter(fs: FeatureSet, signal, s: int = 1,
                      memory_budget: int = DEFAULT_MEMORY_BUDGET) -> np.ndarray:
    """Reference filter on a dense regular grid over the scaled feature box.

    Features are rounded to the nearest grid cell and convolved with a
    normalized Gaussian of width (2s+1) per axis.  The grid costs the
    product of the feature extents, so the memory budget is checked first.
    """
    from scipy import ndimage

    v, vector = _as_signal(signal, fs.n)
    scaled = fs.points * fs.scales[None, :]
    lo = np.floor(scaled.min(axis=0)).astype(np.int64) - s
    cells = np.rint(scaled).astype(np.int64) - lo[None, :]
    extent = cells.max(axis=0) + s + 1
    needed = int(np.prod(extent.astype(object))) * v.shape[1] * 8 * 2
    if needed > memory_budget:
        raise MemoryBudgetError(
            f"dense {fs.d}-D grid of extent {tuple(int(e) for e in extent)} needs {needed} bytes, "
            f"budget is {memory_budget}"
        )
    taps = np.arange(-s, s + 1, dtype=np.float64)
    g1 = np.exp(-0.5 * taps**2)
    g1 /= g1.sum()
    out = np.empty_like(v)
    flat = np.ravel_multi_index(cells.T, extent)
    for c in range(v.shape[1]):
        grid = np.zeros(int(np.prod(extent)))
        np.add.at(grid, flat, v[:, c])
        grid = grid.reshape(tuple(extent))
        for axis in range(fs.d):
            grid = ndimage.correlate1d(grid, g1, axis=axis, mode="constant")
        out[:, c] = grid.reshape(-1)[flat]
    return out[:, 0] if vector else out
