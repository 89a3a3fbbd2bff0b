"""Shared oracles: plain numpy recomputations independent of the package code."""

import numpy as np
import pytest


def batch_stats(points):
    """Population mean/covariance of raw points via numpy (the batch oracle)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0:
        return 0, np.zeros(3), np.zeros((3, 3))
    return len(p), p.mean(axis=0), np.cov(p.T, bias=True).reshape(3, 3)


def brute_nearest(src, dst):
    """O(n*m) nearest-neighbor distances."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def rel_close(a, b, rtol=1e-9, scale=None):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    s = max(1.0, float(np.abs(b).max())) if scale is None else scale
    return float(np.abs(a - b).max(initial=0.0)) <= rtol * s


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report: number -> (passed, title, detail)
ACCEPTANCE = {}
ACCEPTANCE_TITLES = {
    1: "statistics oracle",
    2: "eigen/plane correctness",
    3: "TSDF analytic accuracy",
    4: "ablation ordering",
    5: "baseline comparison direction",
    6: "metric exactness",
    7: "marching-cubes sphere",
    8: "end-to-end determinism",
    9: "delta-curve sanity",
}


def record(number, passed, detail=""):
    ACCEPTANCE[number] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n}. {title}: not run")
