import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lidar_tsdf.geometry import (DegenerateCovarianceError, clamp_eigvals, eigen3_symmetric, eigh3, fit_plane,
                                 fit_planes)
from lidar_tsdf.grid import NeighborhoodStats

from conftest import batch_stats


def _stats(points, level=1):
    n, mean, cov = batch_stats(points)
    return NeighborhoodStats(level, n, mean, cov)


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _angle_deg(a, b):
    c = abs(float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return np.degrees(np.arccos(min(1.0, c)))


def _check_eigen(m, vals, vecs):
    scale = max(1.0, np.linalg.norm(m))
    assert np.all(np.diff(vals) <= 1e-12 * scale)
    assert np.allclose(vecs.T @ vecs, np.eye(3), atol=1e-7)
    assert np.allclose(m @ vecs, vecs * vals, atol=1e-6 * scale)


def test_identity():
    vals, vecs = eigen3_symmetric(np.eye(3))
    assert np.allclose(vals, 1.0)
    _check_eigen(np.eye(3), vals, vecs)


def test_diagonal():
    m = np.diag([3.0, 2.0, 1.0])
    vals, vecs = eigen3_symmetric(m)
    assert np.allclose(vals, [3, 2, 1])
    assert np.allclose(np.abs(vecs), np.eye(3))


def test_random_psd_against_lapack(rng):
    a = rng.normal(size=(1000, 3, 3))
    m = a @ np.transpose(a, (0, 2, 1))
    vals, vecs = eigh3(m)
    recon = np.einsum("nij,nj,nkj->nik", vecs, vals, vecs)
    assert np.abs(recon - m).max() <= 1e-6
    ref = np.linalg.eigvalsh(m)[:, ::-1]
    assert np.allclose(vals, ref, atol=1e-9 * np.abs(ref).max())


@pytest.mark.parametrize("spectrum", [(1, 1, 0), (2, 0, 0), (0, 0, 0), (5, 5, 5), (1, 1 - 1e-9, 0), (1e-8, 0, 0)])
def test_degenerate_spectra(rng, spectrum):
    r = _random_rotation(rng)
    m = r @ np.diag(spectrum) @ r.T
    vals, vecs = eigen3_symmetric(m)
    _check_eigen(m, vals, vecs)
    assert np.allclose(vals, sorted(spectrum, reverse=True), atol=1e-9)


@given(arrays(np.float64, (3, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
@settings(max_examples=300, deadline=None)
def test_eigen_property(a):
    m = a @ a.T
    vals, vecs = eigen3_symmetric(m)
    _check_eigen(m, vals, vecs)


def test_non_finite_matrix_raises():
    with pytest.raises(DegenerateCovarianceError):
        eigen3_symmetric(np.array([[np.nan, 0, 0], [0, 1, 0], [0, 0, 1]]))


def test_eigenvalue_clamp():
    cov = np.eye(3)
    assert np.array_equal(clamp_eigvals(np.array([1.0, 0.5, -5e-10]), cov), [1.0, 0.5, 0.0])
    with pytest.raises(DegenerateCovarianceError):
        clamp_eigvals(np.array([1.0, 0.5, -1e-3]), cov)


def test_plane_z0_sensor_above_and_below(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (300, 2)), np.zeros(300)])
    up = fit_plane(_stats(pts), (0, 0, 10), n_min=10)
    assert np.allclose(up.normal, [0, 0, 1], atol=1e-12)
    assert up.eigvals[2] == pytest.approx(0.0, abs=1e-15)
    down = fit_plane(_stats(pts), (0, 0, -10), n_min=10)
    assert np.allclose(down.normal, [0, 0, -1], atol=1e-12)


def test_support_rejection(rng):
    pts = rng.normal(size=(9, 3))
    assert fit_plane(_stats(pts), (0, 0, 0), n_min=10) is None
    assert fit_plane(_stats(pts), (0, 0, 0), n_min=9) is not None


def test_noisy_tilted_plane_vs_least_squares(rng):
    # samples of x + y + z = 1 over a ~2 m patch, sigma 0.01
    u = rng.uniform(-1, 1, (200, 2))
    n_true = np.ones(3) / np.sqrt(3)
    b1 = np.array([1, -1, 0]) / np.sqrt(2)
    b2 = np.cross(n_true, b1)
    pts = n_true / np.sqrt(3) + u[:, :1] * b1 + u[:, 1:] * b2 + rng.normal(0, 0.01, (200, 1)) * n_true
    est = fit_plane(_stats(pts), (5, 5, 5), n_min=10)
    # oracle: total least squares via SVD of the centered raw samples
    _, _, vt = np.linalg.svd(pts - pts.mean(axis=0))
    assert _angle_deg(est.normal, vt[2]) < 1e-6
    assert _angle_deg(est.normal, n_true) < 2.0
    assert np.dot(est.normal, np.array([5, 5, 5]) - est.center) >= 0


def test_plane_estimate_invariants(rng):
    pts = rng.normal(size=(50, 3)) * [2.0, 1.0, 0.1]
    est = fit_plane(_stats(pts, level=3), (1, 2, 3), n_min=10)
    assert est.level == 3
    assert abs(np.linalg.norm(est.normal) - 1) < 1e-9
    assert abs(abs(np.dot(est.normal, est.e3)) - 1) < 1e-9
    assert np.allclose(est.eigvecs.T @ est.eigvecs, np.eye(3), atol=1e-7)
    assert est.eigvals[0] >= est.eigvals[1] >= est.eigvals[2] >= 0


def test_orientation_tie_keeps_e3():
    # sensor lies in the plane through the center, so e3 . (s - c) == 0 exactly
    counts = np.array([20])
    means = np.zeros((1, 3))
    covs = np.diag([1.0, 0.5, 0.0])[None]
    ok, normals, _, vecs = fit_planes(counts, means, covs, np.array([3.0, 0.0, 0.0]), 10)
    assert ok[0]
    assert np.array_equal(normals[0], vecs[0, :, 2])


def test_rotation_equivariance(rng):
    pts = rng.normal(size=(400, 3)) * [3.0, 1.5, 0.2]
    sensor = np.array([0.0, 0.0, 5.0])
    base = fit_plane(_stats(pts), sensor, 10)
    for _ in range(20):
        r = _random_rotation(rng)
        rot = fit_plane(_stats(pts @ r.T), r @ sensor, 10)
        assert np.allclose(rot.normal, r @ base.normal, atol=1e-6)


@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(60, 3)) * [2.0, 1.0, 0.1]
    center = pts.mean(axis=0)
    sensor = center + np.array([0.3, -0.2, 4.0])
    a = fit_plane(_stats(pts), sensor, 10)
    b = fit_plane(_stats(center + c * (pts - center)), sensor, 10)
    assert np.allclose(a.normal, b.normal, atol=1e-6)


@given(st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_orientation_rule_always_holds(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3)) * rng.uniform(0.01, 3, 3)
    sensor = rng.uniform(-10, 10, 3)
    est = fit_plane(_stats(pts), sensor, 10)
    assert np.dot(est.normal, sensor - est.center) >= 0
