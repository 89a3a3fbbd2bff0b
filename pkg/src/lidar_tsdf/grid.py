"""Sparse voxel grid holding per-voxel Gaussian statistics of inserted points.

Covariances use the population convention (scatter / count) throughout.
Statistics are stored as (count, mean, scatter) so that merging is exact:
the scatter matrix of a union follows from the pairwise (Chan et al.)
combination rule without touching the raw points again.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy.ndimage import correlate1d

EPS_SYM = 1e-9

Index3 = Tuple[int, int, int]


class InvalidPointError(ValueError):
    """Raised when a point with non-finite coordinates is inserted."""


def _zeros3():
    return np.zeros(3)


def _zeros33():
    return np.zeros((3, 3))


@dataclass(frozen=True)
class VoxelStats:
    """Running count / mean / scatter of a set of 3D points."""

    count: int = 0
    mean: np.ndarray = field(default_factory=_zeros3)
    scatter: np.ndarray = field(default_factory=_zeros33)

    @property
    def cov(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((3, 3))
        return self.scatter / self.count

    @property
    def empty(self) -> bool:
        return self.count == 0

    @classmethod
    def from_points(cls, points) -> "VoxelStats":
        """Batch (two-pass) statistics, used as the reference for streaming updates."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return cls()
        mean = pts.mean(axis=0)
        d = pts - mean
        return cls(len(pts), mean, d.T @ d)

    def add(self, p) -> "VoxelStats":
        """Welford update with one point."""
        p = np.asarray(p, dtype=np.float64)
        n = self.count + 1
        delta = p - self.mean
        mean = self.mean + delta / n
        outer = np.outer(delta, p - mean)
        return VoxelStats(n, mean, self.scatter + 0.5 * (outer + outer.T))


def merge_stats(a: VoxelStats, b: VoxelStats) -> VoxelStats:
    """Statistics of the union of the two underlying point sets."""
    if b.count == 0:
        return a
    if a.count == 0:
        return b
    n = a.count + b.count
    delta = b.mean - a.mean
    mean = a.mean + delta * (b.count / n)
    scatter = a.scatter + b.scatter + np.outer(delta, delta) * (a.count * b.count / n)
    return VoxelStats(n, mean, scatter)


@dataclass(frozen=True)
class NeighborhoodStats:
    level: int
    count: int
    mean: np.ndarray
    cov: np.ndarray


class StatGrid:
    """Sparse hash grid of :class:`VoxelStats` with cell size ``cell_size``.

    The origin defaults to the sensor pose so the sensor sits on grid vertex
    (0, 0, 0). Point ``p`` lands in voxel ``floor((p - origin) / cell_size)``;
    vertex ``(i, j, k)`` is the corner at ``origin + cell_size * (i, j, k)``.
    """

    def __init__(self, cell_size: float, sensor_pose=(0.0, 0.0, 0.0), origin=None):
        if not cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {cell_size}")
        self.cell_size = float(cell_size)
        self.sensor_pose = np.asarray(sensor_pose, dtype=np.float64).reshape(3)
        self.origin = self.sensor_pose.copy() if origin is None else np.asarray(origin, dtype=np.float64).reshape(3)
        self.cells: Dict[Index3, VoxelStats] = {}

    @classmethod
    def from_points(cls, points, cell_size: float, sensor_pose=(0.0, 0.0, 0.0)) -> "StatGrid":
        grid = cls(cell_size, sensor_pose)
        grid.insert_points(points)
        return grid

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def total_count(self) -> int:
        return sum(s.count for s in self.cells.values())

    def voxel_index(self, p) -> Index3:
        q = np.floor((np.asarray(p, dtype=np.float64) - self.origin) / self.cell_size)
        return int(q[0]), int(q[1]), int(q[2])

    def vertex_position(self, index) -> np.ndarray:
        return self.origin + self.cell_size * np.asarray(index, dtype=np.float64)

    def insert_point(self, p) -> "StatGrid":
        p = np.asarray(p, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(p)):
            raise InvalidPointError(f"non-finite point {p.tolist()}")
        key = self.voxel_index(p)
        self.cells[key] = self.cells.get(key, VoxelStats()).add(p)
        return self

    def insert_points(self, points) -> "StatGrid":
        """Bulk insertion; each touched voxel gets batch stats merged in."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return self
        if not np.all(np.isfinite(pts)):
            bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
            raise InvalidPointError(f"non-finite point at row {bad}")
        idx = np.floor((pts - self.origin) / self.cell_size).astype(np.int64)
        keys, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        sums = np.stack([np.bincount(inverse, pts[:, a], len(keys)) for a in range(3)], axis=1)
        means = sums / counts[:, None]
        d = pts - means[inverse]
        scatter = np.empty((len(keys), 3, 3))
        for a in range(3):
            for b in range(a, 3):
                scatter[:, a, b] = np.bincount(inverse, d[:, a] * d[:, b], len(keys))
                scatter[:, b, a] = scatter[:, a, b]
        for key, n, mu, sc in zip(map(tuple, keys.tolist()), counts.tolist(), means, scatter):
            batch = VoxelStats(n, mu, sc)
            old = self.cells.get(key)
            self.cells[key] = batch if old is None else merge_stats(old, batch)
        return self

    def neighborhood_stats(self, vertex, k: int) -> NeighborhoodStats:
        """Merged stats of the (2k)^3 voxels surrounding grid vertex ``vertex``."""
        if k < 1:
            raise ValueError(f"neighborhood level must be >= 1, got {k}")
        vi, vj, vk = (int(c) for c in vertex)
        acc = VoxelStats()
        span = range(-k, k)
        for di, dj, dk in itertools.product(span, span, span):
            s = self.cells.get((vi + di, vj + dj, vk + dk))
            if s is not None:
                acc = merge_stats(acc, s)
        return NeighborhoodStats(k, acc.count, acc.mean, acc.cov)

    def occupied(self) -> np.ndarray:
        """Occupied voxel indices, lexicographically sorted, shape (M, 3)."""
        if not self.cells:
            return np.zeros((0, 3), dtype=np.int64)
        idx = np.array(list(self.cells.keys()), dtype=np.int64)
        return idx[np.lexsort(idx.T[::-1])]

    def to_arrays(self):
        """Sorted (indices, counts, means, scatters) arrays of the occupied voxels."""
        idx = self.occupied()
        stats = [self.cells[tuple(i)] for i in idx.tolist()]
        counts = np.array([s.count for s in stats], dtype=np.int64)
        means = np.array([s.mean for s in stats]).reshape(-1, 3)
        scatters = np.array([s.scatter for s in stats]).reshape(-1, 3, 3)
        return idx, counts, means, scatters

    def centered_moments(self):
        """Per-voxel (indices, n, S, M) with moments taken about each voxel's center.

        ``S = sum(p - c)`` and ``M = sum((p - c)(p - c)^T)`` where ``c`` is the
        voxel center. Keeping the moments local avoids cancellation when they
        are later recombined about a nearby grid vertex.
        """
        idx, counts, means, scatters = self.to_arrays()
        centers = self.origin + self.cell_size * (idx + 0.5)
        off = means - centers
        s = counts[:, None] * off
        m = scatters + counts[:, None, None] * off[:, :, None] * off[:, None, :]
        return idx, counts.astype(np.float64), s, m


# index pairs of the 6 unique entries of a symmetric 3x3 matrix
_SYM_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _window_weights(k: int):
    # voxel offsets o in [-k, k-1] seen from a vertex; voxel centers sit at o + 0.5
    o = np.arange(-k, k) + 0.5
    return np.ones(2 * k), o, o * o


def _separable(arr: np.ndarray, kernels) -> np.ndarray:
    out = arr
    for axis, w in enumerate(kernels):
        out = correlate1d(out, w, axis=axis, mode="constant", cval=0.0, origin=0)
    return out


def dense_neighborhood_moments(n: np.ndarray, s: np.ndarray, m: np.ndarray, k: int, alpha: float):
    """Level-k neighborhood statistics for every vertex of a dense block.

    ``n`` has shape ``(X, Y, Z)``, ``s`` ``(3, X, Y, Z)`` and ``m``
    ``(6, X, Y, Z)`` (entries ordered as ``_SYM_PAIRS``); they hold the
    voxel-center moments of voxels ``lo + (i, j, l)``. The output at array
    position ``(i, j, l)`` belongs to grid vertex ``lo + (i, j, l)``, so the
    block must be padded by ``k`` empty voxels wherever the caller needs
    complete windows.

    Returns ``(count, mean_rel, cov)`` with ``mean_rel`` relative to the
    vertex position, shapes ``(X, Y, Z)``, ``(X, Y, Z, 3)``, ``(X, Y, Z, 3, 3)``.
    """
    one, w1, w2 = _window_weights(k)

    def kern(*weighted):
        ks = [one, one, one]
        for axis, w in weighted:
            ks[axis] = w if ks[axis] is one else ks[axis] * w
        return ks

    count = _separable(n, kern())
    first = np.empty((3,) + n.shape)
    for a in range(3):
        first[a] = _separable(s[a], kern()) + alpha * _separable(n, kern((a, w1)))
    second = np.empty((3, 3) + n.shape)
    for p, (a, b) in enumerate(_SYM_PAIRS):
        if a == b:
            nd = _separable(n, kern((a, w2)))
        else:
            nd = _separable(n, kern((a, w1), (b, w1)))
        sd = _separable(s[a], kern((b, w1))) + _separable(s[b], kern((a, w1)))
        second[a, b] = _separable(m[p], kern()) + alpha * sd + alpha * alpha * nd
        second[b, a] = second[a, b]

    count = np.rint(count)
    safe = np.where(count > 0, count, 1.0)
    mean_rel = np.moveaxis(first / safe, 0, -1)
    cov = np.moveaxis(second / safe, (0, 1), (-2, -1)) - mean_rel[..., :, None] * mean_rel[..., None, :]
    empty = count == 0
    mean_rel[empty] = 0.0
    cov[empty] = 0.0
    return count.astype(np.int64), mean_rel, cov


def scatter_dense(idx: np.ndarray, values: np.ndarray, lo, shape) -> np.ndarray:
    """Place per-voxel ``values`` (leading dim matches ``idx``) into a dense block."""
    out = np.zeros(values.shape[1:] + tuple(shape))
    rel = idx - np.asarray(lo)
    inside = np.all((rel >= 0) & (rel < np.asarray(shape)), axis=1)
    rel = rel[inside]
    vals = values[inside]
    if values.ndim == 1:
        out[rel[:, 0], rel[:, 1], rel[:, 2]] = vals
    else:
        for c in range(values.shape[1]):
            out[c][rel[:, 0], rel[:, 1], rel[:, 2]] = vals[:, c]
    return out


def pack_sym(m: np.ndarray) -> np.ndarray:
    """(N, 3, 3) symmetric -> (N, 6) in ``_SYM_PAIRS`` order."""
    return np.stack([m[:, a, b] for a, b in _SYM_PAIRS], axis=1)

