"""Adaptive neighborhood selection and signed-distance evaluation on grid vertices."""

from __future__ import annotations

import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .geometry import LAMBDA_FLOOR, PlaneEstimate, fit_plane, fit_planes
from .grid import StatGrid, dense_neighborhood_moments, pack_sym, scatter_dense

log = logging.getLogger(__name__)

# xy tile edge in vertices; blocks are about (tile + 2 k_max)^2 x (z extent)
_TILE_XY = 48


class ConfigError(ValueError):
    pass


class Mode(str, enum.Enum):
    AN_GC = "an-gc"
    AN = "an"
    CN_GC = "cn-gc"
    CN = "cn"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("+", "-").replace("_", "-")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}; expected one of {[m.value for m in cls]}") from None

    @property
    def adaptive(self) -> bool:
        return self in (Mode.AN_GC, Mode.AN)

    @property
    def gated(self) -> bool:
        return self in (Mode.AN_GC, Mode.CN_GC)


CONFIDENCE_CONVENTIONS = ("peak", "raw")


@dataclass
class ReconstructionConfig:
    alpha: float = 0.2
    tau: float = 0.2
    n_min: int = 10
    k_max: int = 5
    mode: Mode = Mode.AN_GC
    fixed_k: Optional[int] = None
    truncation: Optional[float] = None
    confidence: str = "peak"

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.fixed_k is None:
            self.fixed_k = self.k_max
        if self.truncation is None:
            self.truncation = self.alpha * self.k_max
        self.validate()

    def validate(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if not self.tau >= 0:
            raise ConfigError(f"tau must be >= 0, got {self.tau}")
        if self.n_min < 1:
            raise ConfigError(f"n_min must be >= 1, got {self.n_min}")
        if self.k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {self.k_max}")
        if not 1 <= self.fixed_k <= self.k_max:
            raise ConfigError(f"fixed_k must lie in [1, k_max={self.k_max}], got {self.fixed_k}")
        if not self.truncation > 0:
            raise ConfigError(f"truncation must be > 0, got {self.truncation}")
        if self.confidence not in CONFIDENCE_CONVENTIONS:
            raise ConfigError(f"confidence must be one of {CONFIDENCE_CONVENTIONS}, got {self.confidence!r}")

    @property
    def levels(self) -> range:
        if self.mode.adaptive:
            return range(1, self.k_max + 1)
        return range(self.fixed_k, self.fixed_k + 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


@dataclass
class TsdfField:
    """Signed distances on a block of grid vertices; NaN marks undefined vertices.

    ``values[i, j, l]`` belongs to vertex ``lo + (i, j, l)`` located at
    ``origin + cell_size * (lo + (i, j, l))``. ``levels`` holds the selected
    neighborhood level (0 where undefined).
    """

    origin: np.ndarray
    cell_size: float
    lo: np.ndarray
    values: np.ndarray
    truncation: float
    levels: Optional[np.ndarray] = None

    @classmethod
    def from_samples(cls, indices, values, cell_size, truncation, origin=(0.0, 0.0, 0.0)) -> "TsdfField":
        """Build a field from sparse ``(index, value)`` samples."""
        idx = np.asarray(indices, dtype=np.int64).reshape(-1, 3)
        vals = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(idx) == 0:
            return cls(np.asarray(origin, float), float(cell_size), np.zeros(3, np.int64), np.full((0, 0, 0), np.nan), truncation)
        lo = idx.min(axis=0)
        shape = idx.max(axis=0) - lo + 1
        grid = np.full(tuple(shape), np.nan)
        rel = idx - lo
        grid[rel[:, 0], rel[:, 1], rel[:, 2]] = vals
        return cls(np.asarray(origin, float), float(cell_size), lo, grid, float(truncation))

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.values)

    def value_at(self, index) -> Optional[float]:
        rel = np.asarray(index, dtype=np.int64) - self.lo
        if np.any(rel < 0) or np.any(rel >= self.values.shape):
            return None
        v = self.values[tuple(rel)]
        return None if np.isnan(v) else float(v)

    def defined_indices(self) -> np.ndarray:
        return np.argwhere(self.defined) + self.lo

    def positions(self, indices) -> np.ndarray:
        return self.origin + self.cell_size * np.asarray(indices, dtype=np.float64)


def gaussian_confidences(eigvals: np.ndarray, eigvecs: np.ndarray, rel: np.ndarray, convention: str = "peak") -> np.ndarray:
    """Vectorized confidence of vertices given ``rel = vertex - center``.

    The in-plane coordinates of the vertex projection equal ``e1 . rel`` and
    ``e2 . rel`` because both axes are orthogonal to the normal.
    """
    lam1 = np.maximum(eigvals[..., 0], LAMBDA_FLOOR)
    lam2 = np.maximum(eigvals[..., 1], LAMBDA_FLOOR)
    u1 = np.einsum("...i,...i->...", eigvecs[..., :, 0], rel)
    u2 = np.einsum("...i,...i->...", eigvecs[..., :, 1], rel)
    maha2 = u1 * u1 / lam1 + u2 * u2 / lam2
    peak = np.exp(-0.5 * maha2)
    if convention == "peak":
        return peak
    if convention == "raw":
        return peak / (2.0 * np.pi * np.sqrt(lam1 * lam2))
    raise ConfigError(f"unknown confidence convention {convention!r}")


def gaussian_confidence(plane: PlaneEstimate, vertex, convention: str = "peak") -> float:
    """Likelihood of the vertex's in-plane projection under the plane's 2D Gaussian."""
    rel = np.asarray(vertex, dtype=np.float64) - plane.center
    return float(gaussian_confidences(plane.eigvals, plane.eigvecs, rel, convention))


def select_level(grid: StatGrid, vertex_index, cfg: ReconstructionConfig):
    """Return ``(level, plane)`` for one vertex, or ``None`` when no level qualifies."""
    v = grid.vertex_position(vertex_index)
    for k in cfg.levels:
        stats = grid.neighborhood_stats(vertex_index, k)
        plane = fit_plane(stats, grid.sensor_pose, cfg.n_min)
        if plane is None:
            continue
        if cfg.mode.gated and gaussian_confidence(plane, v, cfg.confidence) < cfg.tau:
            continue
        return k, plane
    return None


def signed_distance(plane: PlaneEstimate, vertex, truncation: float) -> float:
    d = float(np.dot(plane.normal, np.asarray(vertex, dtype=np.float64) - plane.center))
    return float(np.clip(d, -truncation, truncation))


def _evaluate_tile(n, s, m, pad, out_shape, cfg: ReconstructionConfig, sensor_rel_vertices):
    """Resolve one dense tile; returns (values, levels) for the unpadded vertex region."""
    values = np.full(out_shape, np.nan)
    levels = np.zeros(out_shape, dtype=np.int8)
    unresolved = np.ones(out_shape, dtype=bool)
    crop = tuple(slice(pad, pad + w) for w in out_shape)
    for k in cfg.levels:
        count, mean_rel, cov = dense_neighborhood_moments(n, s, m, k, cfg.alpha)
        count, mean_rel, cov = count[crop], mean_rel[crop], cov[crop]
        cand = unresolved & (count >= cfg.n_min)
        if not np.any(cand):
            continue
        # planes are fitted in vertex-relative coordinates: the sensor moves with them
        centers = mean_rel[cand]
        to_sensor = sensor_rel_vertices(cand)
        ok, normals, vals, vecs = fit_planes(count[cand], centers, cov[cand], to_sensor, cfg.n_min)
        rel = -centers
        passed = ok
        if cfg.mode.gated:
            passed = passed & (gaussian_confidences(vals, vecs, rel, cfg.confidence) >= cfg.tau)
        sdf = np.clip(np.einsum("ni,ni->n", normals, rel), -cfg.truncation, cfg.truncation)
        where = np.argwhere(cand)[passed]
        values[tuple(where.T)] = sdf[passed]
        levels[tuple(where.T)] = k
        unresolved[tuple(where.T)] = False
    return values, levels


def _tile_ranges(lo, hi, tile):
    """Half-open xy vertex tiles covering ``[lo, hi]`` (inclusive)."""
    xs = range(int(lo[0]), int(hi[0]) + 1, tile)
    ys = range(int(lo[1]), int(hi[1]) + 1, tile)
    return [(x, min(x + tile, int(hi[0]) + 1), y, min(y + tile, int(hi[1]) + 1)) for x in xs for y in ys]


def compute_tsdf(grid: StatGrid, cfg: ReconstructionConfig, threads: int = 0) -> TsdfField:
    """Evaluate the truncated signed distance at every vertex near occupied voxels.

    Vertices are processed in xy tiles. Each tile's dense block is shrunk to
    the occupied voxels inside its window (plus the neighborhood halo), so
    the work follows the scanned surface rather than the bounding volume.
    Neighborhood sums come from separable window filters over voxel-centered
    moments; tiles are independent and the result does not depend on the
    thread count.
    """
    if abs(grid.cell_size - cfg.alpha) > 1e-12 * cfg.alpha:
        raise ConfigError(f"grid cell size {grid.cell_size} differs from alpha {cfg.alpha}")
    origin = grid.origin
    idx, n_vox, s_vox, m_vox = grid.centered_moments()
    if len(idx) == 0:
        return TsdfField(origin, grid.cell_size, np.zeros(3, np.int64), np.full((0, 0, 0), np.nan), cfg.truncation,
                         np.zeros((0, 0, 0), np.int8))

    k = max(cfg.levels)
    # vertex v sees voxels v-k .. v+k-1, so occupied voxel c reaches vertices c-k+1 .. c+k
    lo = idx.min(axis=0) - k + 1
    hi = idx.max(axis=0) + k
    shape = tuple(int(c) for c in hi - lo + 1)
    m6 = pack_sym(m_vox)
    sensor_rel_origin = grid.sensor_pose - origin
    alpha = grid.cell_size

    def run(tile):
        x0, x1, y0, y1 = tile
        sel = ((idx[:, 0] >= x0 - k) & (idx[:, 0] <= x1 - 1 + k - 1)
               & (idx[:, 1] >= y0 - k) & (idx[:, 1] <= y1 - 1 + k - 1))
        if not np.any(sel):
            return None
        tidx = idx[sel]
        v_lo = np.maximum(tidx.min(axis=0) - k + 1, [x0, y0, lo[2]])
        v_hi = np.minimum(tidx.max(axis=0) + k, [x1 - 1, y1 - 1, hi[2]])
        out_shape = tuple(int(c) for c in v_hi - v_lo + 1)
        block_lo = v_lo - k
        block_shape = tuple(c + 2 * k for c in out_shape)
        n = scatter_dense(tidx, n_vox[sel], block_lo, block_shape)
        s = scatter_dense(tidx, s_vox[sel], block_lo, block_shape)
        m = scatter_dense(tidx, m6[sel], block_lo, block_shape)

        def sensor_rel_vertices(mask):
            return sensor_rel_origin - alpha * (np.argwhere(mask) + v_lo)

        vals, levels = _evaluate_tile(n, s, m, k, out_shape, cfg, sensor_rel_vertices)
        return v_lo - lo, vals, levels

    tiles = _tile_ranges(lo, hi, _TILE_XY)
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers == 1 or len(tiles) == 1:
        results = [run(t) for t in tiles]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tiles))

    values = np.full(shape, np.nan)
    levels = np.zeros(shape, dtype=np.int8)
    for res in results:
        if res is None:
            continue
        off, vals, lev = res
        sl = tuple(slice(int(o), int(o) + w) for o, w in zip(off, vals.shape))
        values[sl] = vals
        levels[sl] = lev
    log.debug("tsdf: %d of %d vertices defined", int(np.isfinite(values).sum()), values.size)
    return TsdfField(origin, grid.cell_size, lo, values, cfg.truncation, levels)
