"""Dense CRF mean-field inference with permutohedral pairwise kernels.

Every pairwise term filters the marginals with a scalar lattice kernel
shared by all labels.  The per-point scaling ``N_i`` (symmetric
normalization from the Gaussian baseline) is fixed when the term is built,
so a message is linear in the kernel weights and the unrolled inference
has exact gradients.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .filterops import (
    BlurMatrix,
    PermutohedralKernel,
    build_blur_matrix,
    convolve,
    gaussian_kernel,
    kernel_gradient,
    slice_signal,
    splat,
)
from .lattice import FeatureSet, LatticeIndex, build_index, neighbor_offsets
from .nn import SGD, Layer, softmax

log = logging.getLogger(__name__)

__all__ = [
    "potts",
    "PairwiseTerm",
    "pairwise_term",
    "MeanFieldModel",
    "mf_step",
    "mf_inference",
    "mf_loss_and_grads",
    "mf_train",
    "dense_pairwise_matrix",
    "brute_force_step",
    "unaries_from_logits",
    "CrfBenchmark",
    "make_crf_benchmark",
    "pixel_accuracy",
]


def potts(L: int, weight: float = 1.0) -> np.ndarray:
    """Potts compatibility: 0 on the diagonal, ``weight`` elsewhere."""
    if L < 2:
        raise ValueError("need at least two labels")
    return weight * (1.0 - np.eye(L))


def _expand(w: np.ndarray, d: int, s: int, L: int) -> PermutohedralKernel:
    # scalar kernel applied independently to each of L channels
    return PermutohedralKernel(d, s, np.einsum("ab,t->abt", np.eye(L), w))


def _self_pair_weights(index: LatticeIndex, s: int) -> sp.csr_matrix:
    """C[i, o] = sum over corner pairs (k, l) of i with key_l - key_k = offset_o of b_ik b_il.

    The filtered value at i contains (C @ w)_i times its own input.
    """
    d = index.d
    offsets = neighbor_offsets(d, s)
    lookup = {tuple(int(c) for c in o): i for i, o in enumerate(offsets)}
    keys, b = index.corner_keys, index.weights
    n, dp1 = b.shape
    rows, cols, vals = [], [], []
    for k in range(dp1):
        for l in range(dp1):
            diff = keys[:, l, :] - keys[:, k, :]
            uniq, inv = np.unique(diff, axis=0, return_inverse=True)
            code = np.array([lookup[tuple(int(c) for c in u)] for u in uniq])
            rows.append(np.arange(n))
            cols.append(code[inv.reshape(-1)])
            vals.append(b[:, k] * b[:, l])
    C = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, offsets.shape[0]),
    )
    return C.tocsr()


@dataclass(frozen=True)
class PairwiseTerm:
    """Lattice geometry of one pairwise kernel on one image."""

    index: LatticeIndex
    blur: BlurMatrix
    s: int
    scale: np.ndarray            # fixed per-point N_i
    self_weights: sp.csr_matrix  # n x t, see _self_pair_weights
    features: FeatureSet | None = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.index.d

    @property
    def n(self) -> int:
        return self.index.n

    def raw(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        """slice(B * splat(x)) with the scalar kernel ``w`` on every channel."""
        kern = _expand(w, self.d, self.s, x.shape[1])
        return slice_signal(self.index, convolve(self.index, splat(self.index, x), kern, self.blur))

    def apply(self, w: np.ndarray, q: np.ndarray) -> np.ndarray:
        """(A q)_i = N_i sum_{j != i} k_ij N_j q_j."""
        N = self.scale[:, None]
        diag = (self.self_weights @ w) * self.scale ** 2
        return N * self.raw(w, N * q) - diag[:, None] * q

    def apply_transpose(self, w: np.ndarray, g: np.ndarray) -> np.ndarray:
        N = self.scale[:, None]
        w_t = w[_negation(self.d, self.s)]
        diag = (self.self_weights @ w) * self.scale ** 2
        return N * self.raw(w_t, N * g) - diag[:, None] * g

    def kernel_grad(self, w: np.ndarray, q: np.ndarray, g: np.ndarray) -> np.ndarray:
        """Gradient of <g, A q> with respect to the scalar kernel ``w``."""
        N = self.scale[:, None]
        L = q.shape[1]
        kern = _expand(w, self.d, self.s, L)
        lg = splat(self.index, N * g)       # slice^T
        lq = splat(self.index, N * q)
        full = kernel_gradient(self.index, lg, lq, kern, self.blur)
        grad = np.einsum("aat->t", full)
        dd = -np.sum(g * q, axis=1) * self.scale ** 2
        return grad + self.self_weights.T @ dd


_NEG: dict = {}


def _negation(d: int, s: int) -> np.ndarray:
    key = (d, s)
    if key not in _NEG:
        offsets = neighbor_offsets(d, s)
        lookup = {tuple(o): i for i, o in enumerate(offsets)}
        _NEG[key] = np.array([lookup[tuple(-o)] for o in offsets])
    return _NEG[key]


def pairwise_term(features: FeatureSet, s: int = 1, normalize: bool = True) -> PairwiseTerm:
    """Build the lattice for one kernel.

    With ``normalize`` the fixed scaling is N_i = (sum_{j != i} g_ij)^(-1/2)
    for the Gaussian baseline g, so the baseline message is symmetrically
    normalized (N_i = 0 for points with no neighbor); otherwise N = 1.
    """
    index = build_index(features)
    blur = build_blur_matrix(index, s)
    C = _self_pair_weights(index, s)
    ones = np.ones(index.n)
    term = PairwiseTerm(index, blur, s, ones, C, features)
    if normalize:
        g = gaussian_kernel(index.d, s).weights[0, 0]
        dens = term.apply(g, ones[:, None])[:, 0]
        # points without neighbors hold only round-off here; they get no message
        alive = dens > 1e-9 * (C @ g)
        scale = np.zeros(index.n)
        scale[alive] = 1.0 / np.sqrt(dens[alive])
        term = PairwiseTerm(index, blur, s, scale, C, features)
    return term


@dataclass
class MeanFieldModel:
    """Unaries, label compatibility and kernel banks for one image.

    ``banks[k]`` holds the scalar weights of kernel k: one vector when
    tied, ``steps`` vectors when ``loose``.
    """

    unaries: np.ndarray
    compatibility: np.ndarray
    terms: list
    banks: list
    steps: int = 5
    loose: bool = False

    def __post_init__(self):
        self.unaries = np.asarray(self.unaries, dtype=np.float64)
        if self.unaries.ndim != 2 or self.unaries.shape[1] < 2:
            raise ValueError("unaries must be n x L with L >= 2")
        if not np.all(np.isfinite(self.unaries)):
            raise ValueError("unaries contain non-finite values")
        L = self.unaries.shape[1]
        if self.compatibility.shape != (L, L):
            raise ValueError(f"compatibility must be {L} x {L}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if len(self.terms) != len(self.banks):
            raise ValueError("one weight bank per pairwise term")
        for term in self.terms:
            if term.n != self.unaries.shape[0]:
                raise ValueError("pairwise term and unaries disagree on n")
        for bank in self.banks:
            if self.loose and len(bank) != self.steps:
                raise ValueError("loose mode needs one kernel per step")
            if not self.loose and len(bank) != 1:
                raise ValueError("tied mode needs exactly one kernel")

    @property
    def n_labels(self) -> int:
        return self.unaries.shape[1]

    def weights(self, k: int, step: int) -> np.ndarray:
        bank = self.banks[k]
        return bank[step] if self.loose else bank[0]

    def init(self) -> np.ndarray:
        return softmax(-self.unaries)


def unaries_from_logits(logits: np.ndarray) -> np.ndarray:
    """Negative log-softmax, turning raw class scores into unaries."""
    z = logits - logits.max(axis=1, keepdims=True)
    return -(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))


def _message(model: MeanFieldModel, q: np.ndarray, step: int):
    filtered = [t.apply(model.weights(k, step), q) for k, t in enumerate(model.terms)]
    total = sum(filtered) if filtered else np.zeros_like(q)
    return total @ model.compatibility.T, filtered


def mf_step(model: MeanFieldModel, q: np.ndarray, step: int = 0) -> np.ndarray:
    """q_i ∝ exp(-psi_i - m_i), m_i(x) = sum_k sum_x' mu(x, x') (A_k q)_i(x')."""
    m, _ = _message(model, q, step)
    return softmax(-model.unaries - m)


def mf_inference(model: MeanFieldModel, init: np.ndarray | None = None,
                 history: list | None = None) -> np.ndarray:
    """Run ``model.steps`` updates; ``history`` collects every iterate."""
    q = model.init() if init is None else np.asarray(init, dtype=np.float64)
    if history is not None:
        history.append(q)
    for t in range(model.steps):
        q = mf_step(model, q, t)
        if history is not None:
            history.append(q)
    return q


def mf_loss_and_grads(model: MeanFieldModel, labels: np.ndarray, learn_compat: bool = False):
    """Mean log loss of the final marginals and its gradients.

    Returns ``(loss, bank_grads, compat_grad)`` where ``bank_grads``
    mirrors ``model.banks`` and ``compat_grad`` is None unless requested.
    """
    labels = np.asarray(labels).reshape(-1)
    n, L = model.unaries.shape
    if labels.shape[0] != n:
        raise ValueError("one label per point required")
    if labels.min() < 0 or labels.max() >= L:
        raise ValueError("label out of range")
    qs, filt = [model.init()], []
    for t in range(model.steps):
        m, f = _message(model, qs[-1], t)
        filt.append(f)
        qs.append(softmax(-model.unaries - m))
    q = qs[-1]
    rows = np.arange(n)
    loss = -np.mean(np.log(np.maximum(q[rows, labels], 1e-300)))
    gq = np.zeros_like(q)
    gq[rows, labels] = -1.0 / (n * np.maximum(q[rows, labels], 1e-300))

    bank_grads = [[np.zeros_like(w) for w in bank] for bank in model.banks]
    gmu = np.zeros_like(model.compatibility) if learn_compat else None
    for t in reversed(range(model.steps)):
        qn = qs[t + 1]
        gz = qn * (gq - np.sum(gq * qn, axis=1, keepdims=True))
        gm = -gz                                  # z = -psi - m
        if gmu is not None:
            if filt[t]:
                gmu += gm.T @ sum(filt[t])
        gf = gm @ model.compatibility             # grad wrt each A_k q
        q_prev = qs[t]
        gq = np.zeros_like(q_prev)
        for k, term in enumerate(model.terms):
            w = model.weights(k, t)
            slot = t if model.loose else 0
            bank_grads[k][slot] += term.kernel_grad(w, q_prev, gf)
            gq += term.apply_transpose(w, gf)
    return loss, bank_grads, gmu


def dense_pairwise_matrix(term: PairwiseTerm, w: np.ndarray) -> np.ndarray:
    """Explicit n x n matrix of k_ij (including i = j) built from dense matrices."""
    from .autograd import Instance, dense_oracle

    if term.features is None:
        raise ValueError("term was built without retained features")
    n = term.n
    inst = Instance(term.features, np.zeros((n, 1)),
                    PermutohedralKernel(term.d, term.s, w.reshape(1, 1, -1)))
    o = dense_oracle(inst, grad_out=np.zeros((n, 1)))
    return o.slice_matrix @ o.blur_matrix @ o.splat_matrix


def brute_force_step(model: MeanFieldModel, q: np.ndarray, step: int = 0) -> np.ndarray:
    """One update as an explicit double sum over all pairs j != i."""
    n, L = q.shape
    m = np.zeros((n, L))
    for k, term in enumerate(model.terms):
        Kd = dense_pairwise_matrix(term, model.weights(k, step))
        N = term.scale
        for i in range(n):
            for j in range(n):
                if i != j:
                    kij = N[i] * Kd[i, j] * N[j]
                    for x in range(L):
                        for xp in range(L):
                            m[i, x] += model.compatibility[x, xp] * kij * q[j, xp]
    z = -model.unaries - m
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pixel_accuracy(q_or_labels: np.ndarray, gt: np.ndarray) -> float:
    pred = q_or_labels.argmax(axis=1) if q_or_labels.ndim == 2 else q_or_labels
    return float(np.mean(pred.reshape(-1) == np.asarray(gt).reshape(-1)))


class _Bank(Layer):
    # adapter so the nn SGD optimizer can update kernel banks in place
    def __init__(self, banks):
        super().__init__()
        for k, bank in enumerate(banks):
            for t, w in enumerate(bank):
                self.params[f"{k}.{t}"] = w
        self.zero_grad()


def mf_train(models: list, labels: list, lr: float = 0.01, epochs: int = 10, momentum: float = 0.9,
             weight_decay: float = 0.0005, learn_compat: bool = False, batch: int = 1,
             rng: np.random.Generator | None = None, progress=None):
    """Train the kernel banks shared by ``models`` on per-point labels.

    All models must reference the same bank arrays (and the same
    compatibility array when ``learn_compat``); they are updated in place.
    Returns the mean training loss per epoch.
    """
    if not models:
        raise ValueError("no training instances")
    banks = models[0].banks
    for mdl, lab in zip(models, labels):
        lab = np.asarray(lab)
        if lab.min() < 0 or lab.max() >= mdl.n_labels:
            raise ValueError("label out of range")
    holder = _Bank(banks)
    if learn_compat:
        holder.params["mu"] = models[0].compatibility
        holder.zero_grad()
    opt = SGD([(holder, k) for k in holder.params], lr, momentum, weight_decay)
    rng = np.random.default_rng(0) if rng is None else rng
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(models))
        losses = []
        for start in range(0, len(order), batch):
            holder.zero_grad()
            chunk = order[start:start + batch]
            for i in chunk:
                loss, grads, gmu = mf_loss_and_grads(models[i], labels[i], learn_compat)
                losses.append(loss)
                for k, bank in enumerate(grads):
                    for t, g in enumerate(bank):
                        holder.grads[f"{k}.{t}"] += g
                if gmu is not None:
                    holder.grads["mu"] += 0.5 * (gmu + gmu.T)
            opt.step(1.0 / len(chunk))
            if learn_compat:
                np.fill_diagonal(holder.params["mu"], 0.0)
        curve.append(float(np.mean(losses)))
        if progress is not None:
            progress(epoch + 1, curve[-1])
    return curve


@dataclass
class CrfBenchmark:
    images: np.ndarray
    labels: np.ndarray
    unaries: np.ndarray     # per image, n x L
    seed: int
    config: dict = field(default_factory=dict)


def make_crf_benchmark(n_images: int, seed: int, size: int = 32, tile: int = 12,
                       color_noise: float = 0.02, unary_strength: float = 1.0,
                       unary_noise: float = 1.0, flip_fraction: float = 0.1,
                       flip_size: int = 6) -> CrfBenchmark:
    """Tiles-style images with corrupted true-label unaries.

    Logits are ``unary_strength * onehot(label) + N(0, unary_noise^2)``;
    square regions covering about ``flip_fraction`` of the pixels get their
    two logits swapped.
    """
    from .nn import make_tiles

    rng = np.random.default_rng(seed)
    images, labels = make_tiles(n_images, rng, size, tile, color_noise)
    n = size * size
    un = np.empty((n_images, n, 2))
    n_flip = max(1, int(round(flip_fraction * n / flip_size ** 2)))
    for i in range(n_images):
        lab = labels[i].reshape(-1)
        logits = unary_strength * np.eye(2)[lab] + rng.normal(0.0, unary_noise, size=(n, 2))
        grid = logits.reshape(size, size, 2)
        for _ in range(n_flip):
            r, c = rng.integers(0, size - flip_size + 1, size=2)
            grid[r:r + flip_size, c:c + flip_size] = grid[r:r + flip_size, c:c + flip_size, ::-1]
        un[i] = unaries_from_logits(logits)
    cfg = dict(size=size, tile=tile, color_noise=color_noise, unary_strength=unary_strength,
               unary_noise=unary_noise, flip_fraction=flip_fraction, flip_size=flip_size)
    return CrfBenchmark(images, labels, un, seed, cfg)
