"""Reverse-mode gradients of the splat/convolve/slice pipeline and their oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .filterops import (
    DEFAULT_MEMORY_BUDGET,
    BlurMatrix,
    PermutohedralKernel,
    build_blur_matrix,
    convolve,
    convolve_transpose,
    guard_denominator,
    interpolation_matrix,
    kernel_gradient,
    slice_signal,
    splat,
)
from .lattice import (
    FeatureSet,
    InvalidInputError,
    LatticeIndex,
    build_index,
    build_joint_index,
    find_simplex,
    elevate,
    neighbor_offsets,
)

__all__ = [
    "PipelineTape",
    "forward",
    "backward_signal",
    "backward_kernel",
    "Instance",
    "random_instance",
    "DenseOracle",
    "dense_oracle",
    "GradCheckReport",
    "grad_check",
    "central_differences",
    "extended_loss",
    "relative_error",
]


@dataclass(frozen=True)
class PipelineTape:
    """Forward activations kept for the backward pass.

    ``splat_out`` is S_splat v, needed by the kernel gradient.  When the
    forward pass was normalized, ``normalizer`` holds the all-ones
    response, which the backward pass treats as a constant.
    """

    idx_in: LatticeIndex
    idx_out: LatticeIndex
    blur: BlurMatrix
    kernel: PermutohedralKernel
    splat_out: np.ndarray
    normalizer: np.ndarray | None = None
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.idx_out.n, self.kernel.c_out)


def forward(idx_in: LatticeIndex, idx_out: LatticeIndex | None, signal,
            kernel: PermutohedralKernel, blur: BlurMatrix | None = None,
            normalize: bool = False, normalizer: np.ndarray | None = None,
            memory_budget: int = DEFAULT_MEMORY_BUDGET) -> tuple[np.ndarray, PipelineTape]:
    """Run the pipeline and return ``(output, tape)``.

    ``normalizer`` overrides the all-ones response when ``normalize`` is
    set, which lets a learned kernel divide by a fixed reference density.
    """
    idx_out = idx_in if idx_out is None else idx_out
    if idx_out.table is not idx_in.table:
        raise InvalidInputError("input and output indices must share one lattice table")
    v = np.asarray(signal, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if blur is None:
        blur = build_blur_matrix(idx_in, kernel.s, memory_budget)
    l = splat(idx_in, v)
    out = slice_signal(idx_out, convolve(idx_in, l, kernel, blur, memory_budget))
    norm = None
    if normalize:
        if normalizer is None:
            ones = np.ones((idx_in.n, kernel.c_in))
            normalizer = slice_signal(
                idx_out, convolve(idx_in, splat(idx_in, ones), kernel, blur, memory_budget))
        norm = guard_denominator(np.asarray(normalizer, dtype=np.float64))
        out = out / norm
    tape = PipelineTape(idx_in, idx_out, blur, kernel, l, norm, memory_budget)
    return out, tape


def _lattice_grad(tape: PipelineTape, grad_out) -> np.ndarray:
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape != tape.out_shape:
        raise InvalidInputError(f"grad_out has shape {g.shape}, forward output was {tape.out_shape}")
    if tape.normalizer is not None:
        g = g / tape.normalizer
    return np.asarray(interpolation_matrix(tape.idx_out).T @ g)


def backward_signal(tape: PipelineTape, grad_out) -> np.ndarray:
    """dL/dv = S_splat^T B^T S_slice^T dL/dv'."""
    gl = _lattice_grad(tape, grad_out)
    gl = convolve_transpose(tape.idx_in, gl, tape.kernel, tape.blur, tape.memory_budget)
    if gl.ndim == 1:
        gl = gl[:, None]
    return np.asarray(interpolation_matrix(tape.idx_in) @ gl)


def backward_kernel(tape: PipelineTape, grad_out) -> np.ndarray:
    """dL/dB[a, b, o] = sum_j (S_slice^T dL/dv')[j, a] (S_splat v)[j + offset_o, b]."""
    gl = _lattice_grad(tape, grad_out)
    return kernel_gradient(tape.idx_in, gl, tape.splat_out, tape.kernel, tape.blur,
                           tape.memory_budget)


@dataclass
class Instance:
    """A self-contained filtering problem for gradient and oracle checks."""

    features_in: FeatureSet
    signal: np.ndarray
    kernel: PermutohedralKernel
    features_out: FeatureSet | None = None
    target: np.ndarray | None = None

    def indices(self) -> tuple[LatticeIndex, LatticeIndex]:
        if self.features_out is None:
            idx = build_index(self.features_in)
            return idx, idx
        return build_joint_index(self.features_in, self.features_out)


def random_instance(rng: np.random.Generator, d: int, s: int, n: int, c_in: int = 1,
                    c_out: int = 1, n_out: int | None = None, spread: float = 2.0) -> Instance:
    """Random points packed tightly enough that simplices share corners."""
    scales = rng.uniform(0.5, 1.5, size=d)
    fin = FeatureSet(rng.uniform(0.0, spread, size=(n, d)), scales)
    fout = None
    if n_out is not None:
        fout = FeatureSet(rng.uniform(0.0, spread, size=(n_out, d)), scales)
    kernel = PermutohedralKernel(d, s, rng.normal(size=(c_out, c_in, _t(d, s))))
    signal = rng.normal(size=(n, c_in))
    target = rng.normal(size=(n if n_out is None else n_out, c_out))
    return Instance(fin, signal, kernel, fout, target)


def _t(d, s):
    return neighbor_offsets(d, s).shape[0]


@dataclass
class DenseOracle:
    """Explicit matrices for one instance and the quantities derived from them."""

    splat_matrix: np.ndarray          # m x n_in
    blur_matrix: np.ndarray           # (m c_out) x (m c_in), block (j, k) = B[:, :, offset(k - j)]
    slice_matrix: np.ndarray          # n_out x m
    offset_of_pair: np.ndarray        # m x m, offset index or -1
    output: np.ndarray
    grad_signal: np.ndarray
    grad_kernel: np.ndarray
    keys: list = field(default_factory=list)


MAX_ORACLE_ENTRIES = 10**4


def dense_oracle(inst: Instance, grad_out=None) -> DenseOracle:
    """Assemble S_splat, B and S_slice explicitly and differentiate by hand.

    Lattice points are collected in a plain dict and neighbor pairs are
    found by subtracting keys, so no hashing or gather table is shared with
    the fast path.  ``grad_out`` defaults to the gradient of
    ``0.5 * |v' - target|^2`` (or of ``sum(v')`` without a target).
    """
    fin = inst.features_in
    fout = inst.features_out if inst.features_out is not None else fin
    kernel = inst.kernel
    d, c_in, c_out = fin.d, kernel.c_in, kernel.c_out
    k_in, w_in = find_simplex(elevate(fin.points, fin.scales))
    k_out, w_out = find_simplex(elevate(fout.points, fout.scales))

    dense: dict[tuple, int] = {}
    for corners in (k_in, k_out):
        for row in corners:
            for key in row:
                dense.setdefault(tuple(int(c) for c in key), len(dense))
    m = len(dense)
    if m * max(fin.n, fout.n) > MAX_ORACLE_ENTRIES or m * m > MAX_ORACLE_ENTRIES * 10:
        raise ValueError(f"instance too large for the dense oracle (m={m})")

    S_in = np.zeros((m, fin.n))
    for i in range(fin.n):
        for key, w in zip(k_in[i], w_in[i]):
            S_in[dense[tuple(int(c) for c in key)], i] += w
    S_out = np.zeros((fout.n, m))
    for i in range(fout.n):
        for key, w in zip(k_out[i], w_out[i]):
            S_out[i, dense[tuple(int(c) for c in key)]] += w

    offsets = {tuple(int(c) for c in o): idx for idx, o in enumerate(kernel.offsets)}
    keys = list(dense)
    pair = np.full((m, m), -1, dtype=np.int64)
    B = np.zeros((m, c_out, m, c_in))
    for j, kj in enumerate(keys):
        for k, kk in enumerate(keys):
            o = offsets.get(tuple(b - a for a, b in zip(kj, kk)))
            if o is not None:
                pair[j, k] = o
                B[j, :, k, :] = kernel.weights[:, :, o]
    B2 = B.reshape(m * c_out, m * c_in)

    v = np.asarray(inst.signal, dtype=np.float64).reshape(fin.n, c_in)
    l = S_in @ v
    lp = (B2 @ l.reshape(-1)).reshape(m, c_out)
    out = S_out @ lp

    if grad_out is None:
        grad_out = out - inst.target if inst.target is not None else np.ones_like(out)
    g = np.asarray(grad_out, dtype=np.float64).reshape(out.shape)
    gl = S_out.T @ g                                    # m x c_out
    gv = S_in.T @ (B2.T @ gl.reshape(-1)).reshape(m, c_in)
    gB = np.zeros_like(kernel.weights)
    for j in range(m):
        for k in range(m):
            o = pair[j, k]
            if o >= 0:
                gB[:, :, o] += np.outer(gl[j], l[k])
    return DenseOracle(S_in, B2, S_out, pair, out, gv, gB, keys)


def central_differences(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``x`` (any shape).

    ``f`` may return the per-element terms of a summed loss instead of a
    scalar.  The difference of the two evaluations is then summed term by
    term, so terms the perturbation did not touch cancel without round-off.
    Extended-precision ``x`` is perturbed and summed in its own dtype.
    """
    extended = np.asarray(x).dtype == np.longdouble
    x = np.array(x, dtype=np.longdouble if extended else np.float64)
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = np.asarray(f(x))
        flat[i] = orig - step
        fm = np.asarray(f(x))
        flat[i] = orig
        delta = (fp - fm).ravel()
        total = delta.sum() if extended else math.fsum(delta)
        gflat[i] = float(total / (2 * step))
    return grad


def _sparse_structure(inst: Instance):
    """Splat/slice triplets and neighbor pairs found by key subtraction."""
    fin = inst.features_in
    fout = inst.features_out if inst.features_out is not None else fin
    k_in, w_in = find_simplex(elevate(fin.points, fin.scales))
    k_out, w_out = find_simplex(elevate(fout.points, fout.scales))
    dense: dict[tuple, int] = {}
    for corners in (k_in, k_out):
        for key in corners.reshape(-1, fin.d + 1):
            dense.setdefault(tuple(int(c) for c in key), len(dense))

    def triplets(keys, weights):
        rows = np.repeat(np.arange(keys.shape[0]), keys.shape[1])
        cols = np.array([dense[tuple(int(c) for c in k)] for k in keys.reshape(-1, fin.d + 1)])
        return rows, cols, weights.ravel()

    offsets = inst.kernel.offsets
    J, K, O = [], [], []
    for key, j in dense.items():
        for o, off in enumerate(offsets):
            k = dense.get(tuple(a + b for a, b in zip(key, off)))
            if k is not None:
                J.append(j)
                K.append(k)
                O.append(o)
    return len(dense), triplets(k_in, w_in), triplets(k_out, w_out), (np.array(J), np.array(K), np.array(O))


def extended_loss(inst: Instance):
    """Per-element ``0.5 (v' - target)^2`` evaluated in extended precision.

    Returns ``f(v, w)``; the structure is assembled independently of the
    hash table and gather matrix used by :func:`forward`.
    """
    m, (ri, ci, wi), (ro, co, wo), (J, K, O) = _sparse_structure(inst)
    ld = np.longdouble
    wi, wo = wi.astype(ld), wo.astype(ld)
    c_in, c_out = inst.kernel.c_in, inst.kernel.c_out
    n_out = (inst.features_out or inst.features_in).n
    target = inst.target if inst.target is not None else np.zeros((n_out, c_out))
    target = np.asarray(target, dtype=ld)

    def f(v, w):
        v = np.asarray(v, dtype=ld).reshape(-1, c_in)
        w = np.asarray(w, dtype=ld)
        l = np.zeros((m, c_in), dtype=ld)
        np.add.at(l, ci, wi[:, None] * v[ri])
        lp = np.zeros((m, c_out), dtype=ld)
        np.add.at(lp, J, np.einsum("pab,pb->pa", w[:, :, O].transpose(2, 0, 1), l[K]))
        out = np.zeros((n_out, c_out), dtype=ld)
        np.add.at(out, ro, wo[:, None] * lp[co])
        r = out - target
        return r * r / 2

    return f


def relative_error(analytic, numeric, floor: float = 1e-12) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    signal_error: float
    kernel_error: float
    tolerance: float
    n_params: int

    @property
    def max_error(self) -> float:
        return max(self.signal_error, self.kernel_error)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max relative error {self.max_error:.3e} "
                f"(signal {self.signal_error:.3e}, kernel {self.kernel_error:.3e}, "
                f"{self.n_params} params, tol {self.tolerance:g})")


def grad_check(inst: Instance, tolerance: float = 1e-5, step: float = 1e-5,
               analytic: tuple[np.ndarray, np.ndarray] | None = None,
               extended: bool = True) -> GradCheckReport:
    """Compare analytic gradients of ``0.5 |v' - target|^2`` with central differences.

    The analytic side always runs in float64.  With ``extended`` the
    differenced loss is evaluated in long double, which resolves gradient
    entries many orders of magnitude below the loss; otherwise the fast
    float64 pipeline itself is differenced.  ``analytic`` lets a caller
    supply its own (signal, kernel) gradients, e.g. to confirm that a
    perturbed gradient is caught.
    """
    idx_in, idx_out = inst.indices()
    kernel = inst.kernel
    blur = build_blur_matrix(idx_in, kernel.s)
    v0 = np.asarray(inst.signal, dtype=np.float64).reshape(idx_in.n, kernel.c_in)
    target = inst.target
    if target is None:
        target = np.zeros((idx_out.n, kernel.c_out))

    if extended:
        loss = extended_loss(inst)
        v_fd = v0.astype(np.longdouble)
        w_fd = kernel.weights.astype(np.longdouble)
    else:
        def loss(v, w):
            out, _ = forward(idx_in, idx_out, v, PermutohedralKernel(kernel.d, kernel.s, w), blur)
            r = out - target
            return 0.5 * r * r
        v_fd, w_fd = v0, kernel.weights

    if analytic is None:
        out, tape = forward(idx_in, idx_out, v0, kernel, blur)
        g = out - target
        analytic = (backward_signal(tape, g), backward_kernel(tape, g))
    gv, gw = analytic
    nv = central_differences(lambda v: loss(v, w_fd), v_fd, step)
    nw = central_differences(lambda w: loss(v_fd, w), w_fd, step)
    return GradCheckReport(
        signal_error=float(relative_error(gv, nv).max()),
        kernel_error=float(relative_error(gw, nw).max()),
        tolerance=tolerance,
        n_params=v0.size + kernel.weights.size,
    )
