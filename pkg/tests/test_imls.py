import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidar_tsdf.grid import StatGrid
from lidar_tsdf.imls import ImlsConfig, estimate_normals, imls_tsdf, imls_values
from lidar_tsdf.tsdf import ConfigError, ReconstructionConfig, compute_tsdf


def test_default_parameters():
    cfg = ImlsConfig()
    assert cfg.radius == 1.0 and cfg.k_neighbors == 10 and cfg.truncation == 1.0
    assert cfg.h == pytest.approx(0.33, abs=0.005)
    m = ImlsConfig.matching(alpha=0.2, k_max=5, n_min=10)
    assert m.radius == pytest.approx(1.0) and m.k_neighbors == 10 and m.h == pytest.approx(1 / 3)


@pytest.mark.parametrize("kwargs", [{"radius": 0}, {"h": -1}, {"k_neighbors": 2}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ImlsConfig(**kwargs)


def test_single_point():
    p = np.array([[1.0, 2.0, 3.0]])
    n = np.array([[0.0, 0.6, 0.8]])
    v = imls_values(p, n, p + 0.1 * n, ImlsConfig())
    assert v[0] == pytest.approx(0.1, abs=1e-15)


def test_symmetric_pair_on_plane():
    p = np.array([[-0.3, 0.0, 0.0], [0.3, 0.0, 0.0]])
    n = np.array([[0.0, 0.0, 1.0]] * 2)
    assert imls_values(p, n, [[0.0, 0.4, 0.0]], ImlsConfig())[0] == 0.0


def test_no_neighbor_is_undefined_and_values_truncated():
    p = np.array([[0.0, 0.0, 0.0]])
    n = np.array([[0.0, 0.0, 1.0]])
    cfg = ImlsConfig(radius=1.0, truncation=0.25)
    v = imls_values(p, n, [[0, 0, 1.5], [0, 0, 0.9], [0, 0, -0.9], [0, 0, 0.1]], cfg)
    assert np.isnan(v[0])
    assert v[1:].tolist() == pytest.approx([0.25, -0.25, 0.1])


def test_dense_plane_height(rng):
    xy = rng.uniform(-3, 3, (40000, 2))
    pts = np.column_stack([xy, np.zeros(len(xy))])
    normals = estimate_normals(pts, 10, (0.0, 0.0, 2.0))
    assert np.all(normals[:, 2] > 0.999)
    heights = np.array([-0.1, -0.03, 0.0, 0.02, 0.05, 0.1])
    verts = np.column_stack([rng.uniform(-1, 1, (len(heights), 2)), heights])
    v = imls_values(pts, normals, verts, ImlsConfig())
    assert np.abs(v - heights).max() < 1e-3


def test_normals_face_sensor(rng):
    pts = rng.normal(size=(300, 3)) * [2.0, 2.0, 0.01]
    assert np.all(estimate_normals(pts, 10, (0, 0, -5))[:, 2] < 0)


@given(st.integers(0, 2**31))
@settings(max_examples=50, deadline=None)
def test_value_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(20, 3))
    nrm = rng.normal(size=(20, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    verts = rng.normal(size=(10, 3))
    cfg = ImlsConfig(radius=1.5, h=0.5, truncation=100.0)
    vals = imls_values(pts, nrm, verts, cfg)
    for v, val in zip(verts, vals):
        near = np.linalg.norm(pts - v, axis=1) <= cfg.radius
        if not near.any():
            assert np.isnan(val)
            continue
        d = np.einsum("ni,ni->n", nrm[near], v - pts[near])
        assert d.min() - 1e-12 <= val <= d.max() + 1e-12


def test_candidate_region_matches_adaptive(rng):
    pts = np.column_stack([rng.uniform(-2, 2, (4000, 2)), np.full(4000, -1.0)])
    grid = StatGrid.from_points(pts, 0.2, (0, 0, 0))
    rcfg = ReconstructionConfig(mode="an")
    adaptive = compute_tsdf(grid, rcfg)
    field = imls_tsdf(pts, grid, ImlsConfig.matching(0.2, 5, 10), rcfg.k_max)
    assert np.array_equal(field.lo, adaptive.lo) and field.values.shape == adaptive.values.shape
    # adaptive vertices are IMLS candidates; they are defined whenever a point lies within the radius
    from scipy.spatial import cKDTree
    tree = cKDTree(pts)
    a_idx = adaptive.defined_indices()
    has_point = np.array([len(x) > 0 for x in tree.query_ball_point(adaptive.positions(a_idx), 0.999)])
    assert has_point.sum() > 1000
    assert np.all(field.defined[tuple((a_idx - field.lo)[has_point].T)])
    z = field.positions(field.defined_indices())[:, 2]
    inner = np.all(np.abs(field.positions(field.defined_indices())[:, :2]) < 1.0, axis=1)
    assert np.abs(field.values[field.defined][inner] - np.clip(z[inner] + 1.0, -1, 1)).max() < 1e-3
