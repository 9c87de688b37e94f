"""Permutohedral lattice geometry.

Features are scaled, elevated onto the hyperplane ``sum(y) == 0`` in
``R^(d+1)`` and located inside their enclosing simplex.  Populated lattice
points are kept in a hash table keyed by their integer coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "InvalidInputError",
    "FeatureSet",
    "LatticeTable",
    "LatticeIndex",
    "elevation_matrix",
    "elevate",
    "find_simplex",
    "build_index",
    "build_joint_index",
    "locate",
    "neighbors",
    "neighbor_offsets",
    "filter_size",
    "hash_keys",
    "is_valid_key",
]

_INT64_MAX = np.iinfo(np.int64).max
_WEIGHT_CLAMP = -1e-14


class InvalidInputError(ValueError):
    """Raised for non-finite or otherwise malformed lattice inputs."""


@dataclass(frozen=True)
class FeatureSet:
    """Per-point features ``points`` (n x d) and diagonal scaling ``scales`` (d,)."""

    points: np.ndarray
    scales: np.ndarray

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        scales = np.asarray(self.scales, dtype=np.float64)
        if scales.ndim == 0:
            scales = np.full(points.shape[1], float(scales))
        if points.ndim != 2 or points.shape[0] < 1 or points.shape[1] < 1:
            raise InvalidInputError(f"points must be n x d with n, d >= 1, got {points.shape}")
        if scales.shape != (points.shape[1],):
            raise InvalidInputError(
                f"scales must have shape ({points.shape[1]},), got {scales.shape}"
            )
        if not np.all(np.isfinite(points)) or not np.all(np.isfinite(scales)):
            raise InvalidInputError("features and scales must be finite")
        if np.any(scales <= 0):
            raise InvalidInputError("scales must be strictly positive")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "scales", scales)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


@lru_cache(maxsize=None)
def _elevation_basis(d: int) -> np.ndarray:
    # (d+1) x d, orthogonal columns spanning sum(y) == 0, each of norm sqrt(2/3)(d+1)
    basis = np.zeros((d + 1, d))
    inv_std = (d + 1) * np.sqrt(2.0 / 3.0)
    for a in range(d):
        col = np.zeros(d + 1)
        col[: a + 1] = 1.0
        col[a + 1] = -(a + 1.0)
        basis[:, a] = col * inv_std / np.sqrt((a + 1.0) * (a + 2.0))
    basis.setflags(write=False)
    return basis


def elevation_matrix(scales) -> np.ndarray:
    """Linear map from raw features to elevated lattice coordinates, (d+1) x d."""
    scales = np.asarray(scales, dtype=np.float64)
    return _elevation_basis(scales.shape[0]) * scales[None, :]


def elevate(f, scales) -> np.ndarray:
    """Elevate a d-vector (or an n x d batch) into lattice coordinates."""
    f = np.asarray(f, dtype=np.float64)
    scales = np.asarray(scales, dtype=np.float64)
    if not np.all(np.isfinite(f)) or not np.all(np.isfinite(scales)):
        raise InvalidInputError("elevate requires finite inputs")
    if np.any(scales <= 0):
        raise InvalidInputError("scales must be strictly positive")
    if f.shape[-1] != scales.shape[0]:
        raise InvalidInputError(f"feature dim {f.shape[-1]} != scale dim {scales.shape[0]}")
    return f @ elevation_matrix(scales).T


def find_simplex(y) -> tuple[np.ndarray, np.ndarray]:
    """Enclosing simplex of elevated point(s) ``y``.

    Returns ``(keys, weights)``.  For a single point ``keys`` is
    (d+1) x (d+1), row k being the corner whose coordinates are all
    congruent to k modulo d+1, and ``weights`` holds the barycentric
    coordinates.  Batched input (n x (d+1)) adds a leading axis to both.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    n, dp1 = y.shape
    d = dp1 - 1

    # nearest remainder-0 point, then repair the coordinate sum
    v = y / dp1
    up = np.ceil(v) * dp1
    down = np.floor(v) * dp1
    rem0 = np.where(up - y < y - down, up, down)
    excess = np.rint(rem0.sum(axis=1) / dp1).astype(np.int64)

    diff = y - rem0
    # rank 0 = largest residual; ties broken by dimension index
    order = np.argsort(-diff, axis=1, kind="stable")
    rank = np.empty((n, dp1), dtype=np.int64)
    np.put_along_axis(rank, order, np.arange(dp1)[None, :].repeat(n, axis=0), axis=1)

    rank += excess[:, None]
    low = rank < 0
    high = rank > d
    rank[low] += dp1
    rem0[low] += dp1
    rank[high] -= dp1
    rem0[high] -= dp1

    # accumulate undivided residuals so lattice-exact inputs give exact weights
    resid = y - rem0
    acc = np.zeros((n, d + 2))
    rows = np.repeat(np.arange(n), dp1)
    np.add.at(acc, (rows, (d - rank).ravel()), resid.ravel())
    np.add.at(acc, (rows, (d + 1 - rank).ravel()), -resid.ravel())
    weights = acc[:, :dp1] / dp1
    weights[:, 0] = (dp1 + acc[:, 0] + acc[:, d + 1]) / dp1
    weights[(weights < 0) & (weights >= _WEIGHT_CLAMP)] = 0.0

    base = rem0.astype(np.int64)
    k = np.arange(dp1)
    # corner k: rem0 + k where rank <= d - k, else rem0 + k - (d+1)
    wrap = rank[:, None, :] > (d - k)[None, :, None]
    keys = base[:, None, :] + k[None, :, None] - dp1 * wrap

    if single:
        return keys[0], weights[0]
    return keys, weights


def is_valid_key(key) -> bool:
    key = np.asarray(key, dtype=np.int64)
    dp1 = key.shape[-1]
    if key.sum() != 0:
        return False
    rem = np.mod(key, dp1)
    return bool(np.all(rem == rem[0]))


_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(h: np.ndarray) -> np.ndarray:
    h = h ^ (h >> np.uint64(30))
    h = h * _MIX_A
    h = h ^ (h >> np.uint64(27))
    h = h * _MIX_B
    return h ^ (h >> np.uint64(31))


def hash_keys(keys) -> np.ndarray:
    """64-bit avalanche hash over the first d coordinates of each key."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.int64))
    h = np.zeros(keys.shape[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for col in keys[:, :-1].T:
            h = _mix64(h + _GOLDEN + col.astype(np.uint64))
    return h


class LatticeTable:
    """Hash table of populated lattice points, immutable once built.

    ``keys[j]`` is the full (d+1)-coordinate key of dense index ``j``.
    Lookups hash the canonical part of the key and confirm by exact
    comparison, so hash collisions never alias two points.
    """

    MISSING = -1

    def __init__(self, keys: np.ndarray):
        keys = np.ascontiguousarray(keys, dtype=np.int64)
        keys.setflags(write=False)
        self.keys = keys
        self.d = keys.shape[1] - 1
        hashes = hash_keys(keys) if len(keys) else np.zeros(0, dtype=np.uint64)
        self._order = np.argsort(hashes, kind="stable")
        self._sorted = hashes[self._order]
        # longest run of equal hashes bounds the probe depth in lookup()
        self._max_run = 1
        if len(self._sorted) > 1:
            starts = np.flatnonzero(np.r_[True, self._sorted[1:] != self._sorted[:-1], True])
            self._max_run = int(np.diff(starts).max())

    @property
    def m(self) -> int:
        return self.keys.shape[0]

    def __len__(self) -> int:
        return self.m

    def lookup(self, query) -> np.ndarray:
        """Dense indices of ``query`` keys (k x (d+1)); MISSING where absent."""
        query = np.atleast_2d(np.asarray(query, dtype=np.int64))
        out = np.full(query.shape[0], self.MISSING, dtype=np.int64)
        if self.m == 0 or query.shape[0] == 0:
            return out
        h = hash_keys(query)
        pos = np.searchsorted(self._sorted, h, side="left")
        for r in range(self._max_run):
            p = pos + r
            inside = p < self.m
            pc = np.where(inside, p, 0)
            hit = inside & (self._sorted[pc] == h) & (out == self.MISSING)
            if not hit.any():
                continue
            cand = self._order[pc[hit]]
            exact = np.all(self.keys[cand] == query[hit], axis=1)
            idx = np.flatnonzero(hit)[exact]
            out[idx] = cand[exact]
        return out

    def __contains__(self, key) -> bool:
        return bool(self.lookup(key)[0] != self.MISSING)


@dataclass(frozen=True)
class LatticeIndex:
    """Sparse embedding of a point set: corner indices J_i and weights b_ij.

    ``corners`` may contain ``LatticeTable.MISSING`` only for indices made
    by :func:`locate` against a table that lacks some corners; ``misses``
    counts such entries.
    """

    table: LatticeTable
    corners: np.ndarray
    weights: np.ndarray
    scales: np.ndarray
    misses: int = 0
    corner_keys: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.corners.shape[0]

    @property
    def d(self) -> int:
        return self.table.d

    @property
    def m(self) -> int:
        return self.table.m


def _simplices(fs: FeatureSet):
    keys, weights = find_simplex(elevate(fs.points, fs.scales))
    return keys, weights


def _dedupe(all_keys: np.ndarray):
    """Unique keys in order of first appearance plus inverse map."""
    uniq, first, inverse = np.unique(all_keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return uniq[order], remap[inverse]


def build_index(fs: FeatureSet) -> LatticeIndex:
    """Splat-side lattice for ``fs``: every simplex corner becomes a table entry."""
    keys, weights = _simplices(fs)
    n, dp1, _ = keys.shape
    uniq, dense = _dedupe(keys.reshape(n * dp1, dp1))
    table = LatticeTable(uniq)
    return LatticeIndex(
        table=table,
        corners=dense.reshape(n, dp1),
        weights=weights,
        scales=fs.scales,
        corner_keys=keys,
    )


def build_joint_index(fs_in: FeatureSet, fs_out: FeatureSet) -> tuple[LatticeIndex, LatticeIndex]:
    """One table over the union of input and output simplex corners.

    Returns the input-side and output-side indices sharing that table.
    """
    if fs_in.d != fs_out.d:
        raise InvalidInputError(f"feature dims differ: {fs_in.d} vs {fs_out.d}")
    if not np.array_equal(fs_in.scales, fs_out.scales):
        raise InvalidInputError("input and output feature sets must share scales")
    k_in, w_in = _simplices(fs_in)
    k_out, w_out = _simplices(fs_out)
    dp1 = fs_in.d + 1
    stacked = np.concatenate([k_in.reshape(-1, dp1), k_out.reshape(-1, dp1)])
    uniq, dense = _dedupe(stacked)
    table = LatticeTable(uniq)
    split = fs_in.n * dp1
    idx_in = LatticeIndex(table, dense[:split].reshape(fs_in.n, dp1), w_in, fs_in.scales, 0, k_in)
    idx_out = LatticeIndex(table, dense[split:].reshape(fs_out.n, dp1), w_out, fs_out.scales, 0, k_out)
    return idx_in, idx_out


def locate(table: LatticeTable, fs: FeatureSet) -> LatticeIndex:
    """Index ``fs`` against an existing table without inserting new points."""
    if fs.d != table.d:
        raise InvalidInputError(f"feature dim {fs.d} != lattice dim {table.d}")
    keys, weights = _simplices(fs)
    n, dp1, _ = keys.shape
    dense = table.lookup(keys.reshape(n * dp1, dp1)).reshape(n, dp1)
    misses = int(np.count_nonzero(dense == LatticeTable.MISSING))
    return LatticeIndex(table, dense, weights, fs.scales, misses, keys)


def filter_size(d: int, s: int) -> int:
    """Number of lattice points within ``s`` hops: (s+1)^(d+1) - s^(d+1)."""
    if d < 1 or s < 0:
        raise ValueError(f"need d >= 1 and s >= 0, got d={d}, s={s}")
    size = (s + 1) ** (d + 1) - s ** (d + 1)
    if size > _INT64_MAX:
        raise OverflowError(f"filter_size({d}, {s}) does not fit in 64 bits")
    return size


@lru_cache(maxsize=None)
def _offset_table(d: int, s: int):
    dp1 = d + 1
    hops = []
    for k in itertools.product(range(s + 1), repeat=dp1):
        if min(k) == 0:
            hops.append(k)
    hops = np.array(hops, dtype=np.int64)
    offsets = dp1 * hops - hops.sum(axis=1, keepdims=True)
    # zero offset first, the rest lexicographic by coordinates
    rest = np.lexsort(offsets[:, ::-1].T)
    rest = [i for i in rest if np.any(offsets[i] != 0)]
    zero = [i for i in range(len(offsets)) if not np.any(offsets[i])]
    order = np.array(zero + rest, dtype=np.int64)
    offsets, hops = offsets[order], hops[order]
    offsets.setflags(write=False)
    hops.setflags(write=False)
    return offsets, hops


def neighbor_offsets(d: int, s: int) -> np.ndarray:
    """Canonical kernel offsets, t x (d+1); row 0 is the zero offset."""
    filter_size(d, s)
    return _offset_table(d, s)[0]


def offset_hops(d: int, s: int) -> np.ndarray:
    """Hop vectors k (t x (d+1), min(k) == 0) with offset = (d+1) k - sum(k)."""
    return _offset_table(d, s)[1]


def neighbors(key, s: int) -> list[tuple[int, ...]]:
    """All lattice points within ``s`` hops of ``key``, sorted lexicographically.

    One hop moves by +/- the sum of any nonempty proper subset of the axis
    steps ``u_a = (d+1) e_a - 1``; the ball is the projection of an
    (s+1)^(d+1) grid block onto the hyperplane.
    """
    key = np.asarray(key, dtype=np.int64)
    if s < 0:
        raise ValueError("s must be >= 0")
    pts = key[None, :] + neighbor_offsets(key.shape[0] - 1, s)
    return sorted(tuple(int(c) for c in p) for p in pts)
