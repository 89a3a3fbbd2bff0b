"""Point-set IMLS signed distance, evaluated on the same vertices as the adaptive method."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import eigh3, orient_normals
from .grid import StatGrid
from .tsdf import ConfigError, TsdfField

_BATCH_VERTICES = 20_000


@dataclass
class ImlsConfig:
    radius: float = 1.0
    k_neighbors: int = 10
    h: float = 1.0 / 3.0
    truncation: Optional[float] = None

    def __post_init__(self):
        if self.truncation is None:
            self.truncation = self.radius
        if not self.radius > 0:
            raise ConfigError(f"IMLS radius must be > 0, got {self.radius}")
        if not self.h > 0:
            raise ConfigError(f"IMLS h must be > 0, got {self.h}")
        if self.k_neighbors < 3:
            raise ConfigError(f"IMLS k_neighbors must be >= 3, got {self.k_neighbors}")

    @classmethod
    def matching(cls, alpha: float, k_max: int, n_min: int, truncation: Optional[float] = None) -> "ImlsConfig":
        """Baseline settings tied to the adaptive method's grid parameters."""
        radius = alpha * k_max
        return cls(radius=radius, k_neighbors=n_min, h=radius / 3.0, truncation=truncation or radius)

    def to_dict(self) -> dict:
        return asdict(self)


def estimate_normals(points, k: int, sensor_pose) -> np.ndarray:
    """k-nearest-neighbor PCA normals oriented toward the sensor."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(pts))
    _, nn = cKDTree(pts).query(pts, k=k)
    nb = pts[nn.reshape(len(pts), k)]
    d = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", d, d) / k
    _, vecs = eigh3(cov)
    return orient_normals(vecs[:, :, 2], pts, sensor_pose)


def imls_values(points, normals, vertices, cfg: ImlsConfig) -> np.ndarray:
    """IMLS distance at each vertex; NaN where no point lies within ``cfg.radius``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    out = np.full(len(verts), np.nan)
    if len(pts) == 0 or len(verts) == 0:
        return out
    tree = cKDTree(pts)
    inv_h2 = 1.0 / (cfg.h * cfg.h)
    for start in range(0, len(verts), _BATCH_VERTICES):
        chunk = verts[start:start + _BATCH_VERTICES]
        pairs = cKDTree(chunk).sparse_distance_matrix(tree, cfg.radius, output_type="ndarray")
        if len(pairs) == 0:
            continue
        vi, pj, dist = pairs["i"], pairs["j"], pairs["v"]
        w = np.exp(-(dist * dist) * inv_h2)
        plane_d = np.einsum("ni,ni->n", nrm[pj], chunk[vi] - pts[pj])
        num = np.bincount(vi, weights=w * plane_d, minlength=len(chunk))
        den = np.bincount(vi, weights=w, minlength=len(chunk))
        hit = np.bincount(vi, minlength=len(chunk)) > 0
        vals = np.full(len(chunk), np.nan)
        # far pairs can underflow every weight; fall back to the nearest point's plane
        good = hit & (den > 0)
        vals[good] = num[good] / den[good]
        lost = np.flatnonzero(hit & ~(den > 0))
        if len(lost):
            _, j = tree.query(chunk[lost])
            vals[lost] = np.einsum("ni,ni->n", nrm[j], chunk[lost] - pts[j])
        out[start:start + len(chunk)] = np.clip(vals, -cfg.truncation, cfg.truncation)
    return out


def imls_tsdf(points, grid: StatGrid, cfg: ImlsConfig, k_max: int, normals=None) -> TsdfField:
    """IMLS field over the adaptive method's candidate vertices.

    Candidates are the vertices whose level-``k_max`` neighborhood holds at
    least one occupied voxel. ``normals`` default to k-NN PCA estimates.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if normals is None:
        normals = estimate_normals(pts, cfg.k_neighbors, grid.sensor_pose)
    occ = grid.occupied()
    if len(occ) == 0:
        return TsdfField(grid.origin, grid.cell_size, np.zeros(3, np.int64), np.full((0, 0, 0), np.nan), cfg.truncation)
    lo = occ.min(axis=0) - k_max + 1
    hi = occ.max(axis=0) + k_max
    shape = tuple(int(s) for s in hi - lo + 1)

    # dilate occupancy by the k_max window: vertex v sees voxels v-k_max .. v+k_max-1
    occ_dense = np.zeros(shape, dtype=bool)
    rel = occ - lo
    occ_dense[tuple(rel.T)] = True
    cand = occ_dense.copy()
    for axis in range(3):
        acc = np.zeros_like(cand)
        for o in range(-k_max, k_max):
            acc |= _shift(cand, -o, axis)
        cand = acc

    vidx = np.argwhere(cand)
    verts = grid.origin + grid.cell_size * (vidx + lo)
    vals = imls_values(pts, normals, verts, cfg)
    values = np.full(shape, np.nan)
    values[tuple(vidx.T)] = vals
    return TsdfField(grid.origin, grid.cell_size, lo, values, cfg.truncation)


def _shift(a: np.ndarray, by: int, axis: int) -> np.ndarray:
    """``out[i] = a[i - by]`` along ``axis`` with zero fill."""
    out = np.zeros_like(a)
    n = a.shape[axis]
    if abs(by) >= n:
        return out
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if by >= 0:
        src[axis], dst[axis] = slice(0, n - by), slice(by, n)
    else:
        src[axis], dst[axis] = slice(-by, n), slice(0, n + by)
    out[tuple(dst)] = a[tuple(src)]
    return out
