"""Set-to-set error metrics between predicted mesh vertices and ground-truth points."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree


class EmptyPointSetError(ValueError):
    pass


def _as_points(x, name: str) -> np.ndarray:
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyPointSetError(f"{name} point set is empty")
    return pts


class NearestIndex:
    """Exact Euclidean nearest-neighbor queries over a fixed point set (k-d tree)."""

    def __init__(self, points):
        self.points = _as_points(points, "index")
        self._tree = cKDTree(self.points)

    def distances(self, queries) -> np.ndarray:
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        d, _ = self._tree.query(q, k=1, eps=0.0)
        return d


def nearest_distances(src, dst) -> np.ndarray:
    """Distance from every ``src`` point to its nearest ``dst`` point."""
    src = _as_points(src, "source")
    dst = _as_points(dst, "target")
    return NearestIndex(dst).distances(src)


def _mean(d: np.ndarray) -> float:
    # rounding in the sum can push the mean of equal values one ulp past the max
    return float(min(d.mean(), d.max()))


def directed_average_error(src, dst) -> float:
    return _mean(nearest_distances(src, dst))


def hausdorff(src, dst) -> float:
    return float(nearest_distances(src, dst).max())


DEFAULT_THRESHOLDS = tuple(np.round(np.arange(0, 101) * 0.01, 2).tolist())


def delta_error_curve(src, dst, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> List[Tuple[float, float]]:
    """Fraction of ``src`` points whose nearest-``dst`` distance is strictly below each threshold."""
    return _delta_from_distances(nearest_distances(src, dst), thresholds)


def _delta_from_distances(d: np.ndarray, thresholds) -> List[Tuple[float, float]]:
    th = np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be sorted ascending")
    ds = np.sort(d)
    fractions = np.searchsorted(ds, th, side="left") / len(ds)
    return [(float(t), float(f)) for t, f in zip(th, fractions)]


def range_profile(src, dst, sensor_pose, bin_width: float = 1.0) -> List[Tuple[float, float]]:
    """Mean nearest-neighbor error of ``src`` bucketed by distance to the sensor.

    Bins are ``[i * bin_width, (i + 1) * bin_width)`` and reported by their
    lower edge; empty bins are omitted.
    """
    src = _as_points(src, "source")
    return _profile_from_distances(src, nearest_distances(src, dst), sensor_pose, bin_width)


def _profile_from_distances(src, d, sensor_pose, bin_width):
    if not bin_width > 0:
        raise ValueError(f"bin_width must be > 0, got {bin_width}")
    r = np.linalg.norm(src - np.asarray(sensor_pose, dtype=np.float64), axis=1)
    bins = np.floor(r / bin_width).astype(np.int64)
    uniq, inv = np.unique(bins, return_inverse=True)
    sums = np.bincount(inv, weights=d)
    counts = np.bincount(inv)
    return [(float(b * bin_width), float(s / c)) for b, s, c in zip(uniq, sums, counts)]


@dataclass
class MetricsReport:
    ae_p_to_gt: float
    ae_gt_to_p: float
    hd_p_to_gt: float
    hd_gt_to_p: float
    delta_curve: List[Tuple[float, float]] = field(default_factory=list)
    range_profile: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def ae_sym(self) -> float:
        return 0.5 * (self.ae_p_to_gt + self.ae_gt_to_p)

    @property
    def hd_sym(self) -> float:
        return 0.5 * (self.hd_p_to_gt + self.hd_gt_to_p)

    def fraction_below(self, threshold: float) -> float:
        for t, f in self.delta_curve:
            if np.isclose(t, threshold):
                return f
        raise KeyError(f"threshold {threshold} not on the delta curve")

    def rows(self):
        return [
            ("ae", "p_to_gt", self.ae_p_to_gt),
            ("ae", "gt_to_p", self.ae_gt_to_p),
            ("ae", "sym", self.ae_sym),
            ("hd", "p_to_gt", self.hd_p_to_gt),
            ("hd", "gt_to_p", self.hd_gt_to_p),
            ("hd", "sym", self.hd_sym),
        ]

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "direction", "value"])
        for metric, direction, value in self.rows():
            w.writerow([metric, direction, repr(float(value))])
        return buf.getvalue()

    def delta_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "fraction"])
        for t, f in self.delta_curve:
            w.writerow([repr(t), repr(f)])
        return buf.getvalue()

    def range_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["range_bin", "mean_error"])
        for b, e in self.range_profile:
            w.writerow([repr(b), repr(e)])
        return buf.getvalue()

    def summary(self) -> str:
        return (f"AE  p->gt {self.ae_p_to_gt:.4f}  gt->p {self.ae_gt_to_p:.4f}  sym {self.ae_sym:.4f} m\n"
                f"HD  p->gt {self.hd_p_to_gt:.4f}  gt->p {self.hd_gt_to_p:.4f}  sym {self.hd_sym:.4f} m")

    @classmethod
    def from_csv(cls, metrics_text: str, delta_text: str = "", range_text: str = "") -> "MetricsReport":
        vals = {}
        for row in csv.DictReader(io.StringIO(metrics_text)):
            vals[(row["metric"], row["direction"])] = float(row["value"])
        delta = [(float(r["threshold"]), float(r["fraction"])) for r in csv.DictReader(io.StringIO(delta_text))] if delta_text else []
        prof = [(float(r["range_bin"]), float(r["mean_error"])) for r in csv.DictReader(io.StringIO(range_text))] if range_text else []
        return cls(vals[("ae", "p_to_gt")], vals[("ae", "gt_to_p")], vals[("hd", "p_to_gt")], vals[("hd", "gt_to_p")], delta, prof)


def evaluate(pred, gt, sensor_pose=(0.0, 0.0, 0.0), thresholds=DEFAULT_THRESHOLDS, bin_width: float = 1.0) -> MetricsReport:
    """Full report for predicted points ``pred`` (mesh vertices) against ``gt``."""
    pred = _as_points(pred, "predicted")
    gt = _as_points(gt, "ground-truth")
    d_p = NearestIndex(gt).distances(pred)
    d_gt = NearestIndex(pred).distances(gt)
    return MetricsReport(
        ae_p_to_gt=_mean(d_p),
        ae_gt_to_p=_mean(d_gt),
        hd_p_to_gt=float(d_p.max()),
        hd_gt_to_p=float(d_gt.max()),
        delta_curve=_delta_from_distances(d_p, thresholds),
        range_profile=_profile_from_distances(pred, d_p, sensor_pose, bin_width),
    )
