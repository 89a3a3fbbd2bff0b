"""PCA plane estimation from neighborhood statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import EPS_SYM, NeighborhoodStats

LAMBDA_FLOOR = 1e-12

# below this relative eigen-gap the closed form loses accuracy
_GAP_TOL = 1e-4
_JACOBI_SWEEPS = 16


class DegenerateCovarianceError(ArithmeticError):
    """Covariance has clearly negative eigenvalues or non-finite entries."""


@dataclass(frozen=True)
class PlaneEstimate:
    """Oriented local plane; ``eigvecs[:, i]`` pairs with ``eigvals[i]`` (descending)."""

    center: np.ndarray
    normal: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    level: int

    @property
    def e1(self) -> np.ndarray:
        return self.eigvecs[:, 0]

    @property
    def e2(self) -> np.ndarray:
        return self.eigvecs[:, 1]

    @property
    def e3(self) -> np.ndarray:
        return self.eigvecs[:, 2]


def _cross_rows_eigvec(b: np.ndarray, lam: np.ndarray) -> np.ndarray:
    # null vector of (b - lam I): the best-conditioned cross product of two rows
    r = b - lam[:, None, None] * np.eye(3)
    c = np.stack([np.cross(r[:, 0], r[:, 1]), np.cross(r[:, 0], r[:, 2]), np.cross(r[:, 1], r[:, 2])], axis=1)
    norms = np.linalg.norm(c, axis=2)
    best = np.argmax(norms, axis=1)
    rows = np.arange(len(b))
    return c[rows, best] / norms[rows, best][:, None]


def _orthonormal_complement(v: np.ndarray):
    # pick the coordinate axis least aligned with v to seed the basis
    axis = np.argmin(np.abs(v), axis=1)
    seed = np.eye(3)[axis]
    u = np.cross(v, seed)
    u /= np.linalg.norm(u, axis=1)[:, None]
    return u, np.cross(v, u)


def _closed_form(b: np.ndarray):
    """Eigen-decomposition of well-separated symmetric matrices (scaled to |b| <= 1)."""
    n = len(b)
    q = np.trace(b, axis1=1, axis2=2) / 3.0
    p1 = b[:, 0, 1] ** 2 + b[:, 0, 2] ** 2 + b[:, 1, 2] ** 2
    diag = np.diagonal(b, axis1=1, axis2=2) - q[:, None]
    p = np.sqrt(((diag ** 2).sum(axis=1) + 2.0 * p1) / 6.0)
    c = (b - q[:, None, None] * np.eye(3)) / p[:, None, None]
    r = np.clip(np.linalg.det(c) / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = q + 2.0 * p * np.cos(phi)
    l3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    l2 = 3.0 * q - l1 - l3

    top_isolated = (l1 - l2) >= (l2 - l3)
    lam_iso = np.where(top_isolated, l1, l3)
    v_iso = _cross_rows_eigvec(b, lam_iso)

    # the remaining pair lives in the complement: exact 2x2 rotation there
    u, w = _orthonormal_complement(v_iso)
    buu = np.einsum("ni,nij,nj->n", u, b, u)
    bww = np.einsum("ni,nij,nj->n", w, b, w)
    buw = np.einsum("ni,nij,nj->n", u, b, w)
    theta = 0.5 * np.arctan2(2.0 * buw, buu - bww)
    ct, st = np.cos(theta)[:, None], np.sin(theta)[:, None]
    va = ct * u + st * w
    vb = -st * u + ct * w

    vecs = np.stack([v_iso, va, vb], axis=2)
    vals = np.einsum("nij,nik,nkj->nj", vecs, b, vecs)
    order = np.argsort(-vals, axis=1, kind="stable")
    rows = np.arange(n)[:, None]
    return vals[rows, order], np.take_along_axis(vecs, order[:, None, :], axis=2), l1, l2, l3


def _jacobi(b: np.ndarray):
    """Cyclic Jacobi on a batch of symmetric 3x3 matrices."""
    a = b.copy()
    v = np.broadcast_to(np.eye(3), a.shape).copy()
    n = len(a)
    rows = np.arange(n)
    for _ in range(_JACOBI_SWEEPS):
        off = a[:, 0, 1] ** 2 + a[:, 0, 2] ** 2 + a[:, 1, 2] ** 2
        if np.all(off <= 1e-32 * np.maximum(1.0, (a ** 2).sum(axis=(1, 2)))):
            break
        for p_, q_ in ((0, 1), (0, 2), (1, 2)):
            apq = a[:, p_, q_]
            active = np.abs(apq) > 1e-300
            tau = np.where(active, (a[:, q_, q_] - a[:, p_, p_]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(active, t, 0.0)
            cs = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * cs
            j = np.broadcast_to(np.eye(3), a.shape).copy()
            j[rows, p_, p_] = cs
            j[rows, q_, q_] = cs
            j[rows, p_, q_] = sn
            j[rows, q_, p_] = -sn
            a = np.transpose(j, (0, 2, 1)) @ a @ j
            v = v @ j
    vals = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(-vals, axis=1, kind="stable")
    return np.take_along_axis(vals, order, axis=1), np.take_along_axis(v, order[:, None, :], axis=2)


def eigh3(m) -> tuple:
    """Batched symmetric 3x3 eigensolver.

    Accepts ``(..., 3, 3)``; returns eigenvalues in descending order and
    eigenvectors as columns (``m @ V = V diag(vals)``). Well-separated
    spectra go through the trigonometric closed form, near-isotropic ones
    through cyclic Jacobi.
    """
    m = np.asarray(m, dtype=np.float64)
    lead = m.shape[:-2]
    a = m.reshape(-1, 3, 3)
    a = 0.5 * (a + np.transpose(a, (0, 2, 1)))
    n = len(a)
    vals = np.zeros((n, 3))
    vecs = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    if n == 0:
        return vals.reshape(lead + (3,)), vecs.reshape(lead + (3, 3))
    if not np.all(np.isfinite(a)):
        raise DegenerateCovarianceError("non-finite matrix entries")

    scale = np.abs(a).max(axis=(1, 2))
    nz = scale > 0
    b = a[nz] / scale[nz, None, None]
    q = np.trace(b, axis1=1, axis2=2) / 3.0
    spread = np.sqrt((((np.diagonal(b, axis1=1, axis2=2) - q[:, None]) ** 2).sum(axis=1)
                      + 2.0 * (b[:, 0, 1] ** 2 + b[:, 0, 2] ** 2 + b[:, 1, 2] ** 2)) / 6.0)

    sub_vals = np.empty((len(b), 3))
    sub_vecs = np.empty((len(b), 3, 3))
    closed = spread > _GAP_TOL
    if np.any(closed):
        cv, cvec, l1, l2, l3 = _closed_form(b[closed])
        gap = np.maximum(l1 - l2, l2 - l3) / np.maximum(spread[closed], 1e-300)
        ok = gap > _GAP_TOL
        idx = np.flatnonzero(closed)
        sub_vals[idx[ok]] = cv[ok]
        sub_vecs[idx[ok]] = cvec[ok]
        closed[idx[~ok]] = False
    if np.any(~closed):
        jv, jvec = _jacobi(b[~closed])
        sub_vals[~closed] = jv
        sub_vecs[~closed] = jvec

    vals[nz] = sub_vals * scale[nz, None]
    vecs[nz] = sub_vecs
    return vals.reshape(lead + (3,)), vecs.reshape(lead + (3, 3))


def eigen3_symmetric(m):
    """Single-matrix convenience wrapper around :func:`eigh3`."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
    vals, vecs = eigh3(m[None])
    return vals[0], vecs[0]


def clamp_eigvals(vals: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Clamp round-off negatives to zero; clearly negative spectra are errors."""
    vals = np.asarray(vals)
    cov = np.asarray(cov)
    scale = np.abs(cov).reshape(cov.shape[:-2] + (9,)).max(axis=-1)
    bad = vals < -(EPS_SYM * np.maximum(1.0, scale))[..., None]
    if np.any(bad):
        raise DegenerateCovarianceError(f"covariance has negative eigenvalue {vals[bad].min():.3e}")
    return np.maximum(vals, 0.0)


def orient_normals(e3: np.ndarray, centers: np.ndarray, sensor_pose) -> np.ndarray:
    """Flip ``e3`` toward the sensor; a zero dot product keeps ``+e3``."""
    to_sensor = np.asarray(sensor_pose, dtype=np.float64) - centers
    dots = np.einsum("...i,...i->...", e3, to_sensor)
    return np.where((dots < 0)[..., None], -e3, e3)


def fit_planes(counts, means, covs, sensor_pose, n_min: int):
    """Vectorized plane fit.

    ``sensor_pose`` is one 3-vector or one per row. Returns ``(ok, normals,
    eigvals, eigvecs)``; rows with ``count < n_min`` have ``ok == False`` and
    zero-filled outputs.
    """
    counts = np.asarray(counts)
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    sensor = np.broadcast_to(np.asarray(sensor_pose, dtype=np.float64), means.shape)
    ok = counts.reshape(-1) >= n_min
    normals = np.zeros((len(ok), 3))
    vals = np.zeros((len(ok), 3))
    vecs = np.zeros((len(ok), 3, 3))
    if np.any(ok):
        v, e = eigh3(covs[ok])
        v = clamp_eigvals(v, covs[ok])
        normals[ok] = orient_normals(e[:, :, 2], means[ok], sensor[ok])
        vals[ok] = v
        vecs[ok] = e
    return ok, normals, vals, vecs


def fit_plane(stats: NeighborhoodStats, sensor_pose, n_min: int) -> Optional[PlaneEstimate]:
    """PCA plane of a neighborhood, or ``None`` when it has fewer than ``n_min`` points."""
    if stats.count < n_min:
        return None
    cov = np.asarray(stats.cov, dtype=np.float64)
    vals, vecs = eigen3_symmetric(cov)
    vals = clamp_eigvals(vals, cov)
    center = np.asarray(stats.mean, dtype=np.float64)
    normal = orient_normals(vecs[:, 2], center, sensor_pose)
    return PlaneEstimate(center, normal, vals, vecs, stats.level)
