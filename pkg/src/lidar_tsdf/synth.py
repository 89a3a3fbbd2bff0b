"""Synthetic spinning-Lidar scans of analytic scenes.

A scene is a list of primitives (ground plane, axis-aligned box, sphere,
vertical capped cylinder). A scanner casts one ray per (layer, azimuth)
pair from its origin and keeps the nearest hit within ``range_max``;
optional Gaussian noise is applied along the ray.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .fileio import PointCloud

_T_EPS = 1e-9


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GroundPlane:
    z: float = 0.0
    kind = "plane"

    def intersect(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - o[2]) / d[:, 2]
        return np.where(np.isfinite(t) & (t > _T_EPS), t, np.inf)

    def distance(self, p):
        return np.abs(p[:, 2] - self.z)


@dataclass(frozen=True)
class Box:
    lo: Tuple[float, float, float]
    hi: Tuple[float, float, float]
    kind = "box"

    def __post_init__(self):
        if not all(h > l for l, h in zip(self.lo, self.hi)):
            raise SceneConfigError(f"box needs hi > lo on every axis, got {self.lo} {self.hi}")

    def intersect(self, o, d):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        # rays parallel to a slab: inside -> unbounded, outside -> miss
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
        tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
        near = tmin.max(axis=1)
        far = tmax.min(axis=1)
        hit = near <= far
        t = np.where(near > _T_EPS, near, np.where(far > _T_EPS, far, np.inf))
        return np.where(hit, t, np.inf)

    def distance(self, p):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        out = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        outside = np.linalg.norm(out, axis=1)
        inside = np.minimum(p - lo, hi - p).min(axis=1)
        return np.where(outside > 0, outside, np.abs(inside))


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    kind = "sphere"

    def __post_init__(self):
        if not self.radius > 0:
            raise SceneConfigError(f"sphere radius must be > 0, got {self.radius}")

    def intersect(self, o, d):
        oc = o - np.asarray(self.center)
        b = d @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t1, t2 = -b - root, -b + root
        t = np.where(t1 > _T_EPS, t1, np.where(t2 > _T_EPS, t2, np.inf))
        return np.where(disc >= 0, t, np.inf)

    def distance(self, p):
        return np.abs(np.linalg.norm(p - np.asarray(self.center), axis=1) - self.radius)


@dataclass(frozen=True)
class Cylinder:
    center: Tuple[float, float]
    radius: float
    z_min: float
    z_max: float
    kind = "cylinder"

    def __post_init__(self):
        if not (self.radius > 0 and self.z_max > self.z_min):
            raise SceneConfigError("cylinder needs radius > 0 and z_max > z_min")

    def intersect(self, o, d):
        cx, cy = self.center
        ox, oy = o[0] - cx, o[1] - cy
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = d[:, 0] * ox + d[:, 1] * oy
        c = ox * ox + oy * oy - self.radius ** 2
        disc = b * b - a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            root = np.sqrt(np.maximum(disc, 0.0))
            cands = [(-b - root) / a, (-b + root) / a]
            for zc in (self.z_min, self.z_max):
                cands.append((zc - o[2]) / d[:, 2])
        best = np.full(len(d), np.inf)
        for i, t in enumerate(cands):
            t = np.where(np.isfinite(t), t, np.inf)
            p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            if i < 2:
                ok = (disc >= 0) & (a > 0) & (p[:, 2] >= self.z_min) & (p[:, 2] <= self.z_max)
            else:
                ok = (p[:, 0] - cx) ** 2 + (p[:, 1] - cy) ** 2 <= self.radius ** 2
            ok &= t > _T_EPS
            best = np.where(ok & (t < best), t, best)
        return best

    def distance(self, p):
        cx, cy = self.center
        r = np.hypot(p[:, 0] - cx, p[:, 1] - cy)
        dr = r - self.radius
        dz = np.maximum(self.z_min - p[:, 2], p[:, 2] - self.z_max)
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        inside = np.minimum(-dr, np.minimum(p[:, 2] - self.z_min, self.z_max - p[:, 2]))
        return np.where((dr > 0) | (dz > 0), outside, inside)


Primitive = Union[GroundPlane, Box, Sphere, Cylinder]


@dataclass
class Scene:
    primitives: List[Primitive] = field(default_factory=list)

    def intersect(self, origin, dirs) -> np.ndarray:
        t = np.full(len(dirs), np.inf)
        for prim in self.primitives:
            t = np.minimum(t, prim.intersect(origin, dirs))
        return t

    def distance(self, points) -> np.ndarray:
        """Unsigned distance to the closest primitive surface."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not self.primitives:
            return np.full(len(p), np.inf)
        return np.min([prim.distance(p) for prim in self.primitives], axis=0)

    def to_dict(self) -> dict:
        return {"primitives": [{"type": p.kind, **asdict(p)} for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        prims = []
        for i, spec in enumerate(d.get("primitives", [])):
            spec = dict(spec)
            kind = spec.pop("type", None)
            try:
                if kind == "plane":
                    prims.append(GroundPlane(float(spec.get("z", 0.0))))
                elif kind == "box":
                    prims.append(Box(tuple(map(float, spec["lo"])), tuple(map(float, spec["hi"]))))
                elif kind == "sphere":
                    prims.append(Sphere(tuple(map(float, spec["center"])), float(spec["radius"])))
                elif kind == "cylinder":
                    prims.append(Cylinder(tuple(map(float, spec["center"])), float(spec["radius"]),
                                          float(spec["z_min"]), float(spec["z_max"])))
                else:
                    raise SceneConfigError(f"primitive {i}: unknown type {kind!r}")
            except (KeyError, TypeError, ValueError) as e:
                if isinstance(e, SceneConfigError):
                    raise
                raise SceneConfigError(f"primitive {i} ({kind}): {e}") from None
        return cls(prims)


@dataclass
class ScannerSpec:
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    layers: int = 64
    vertical_fov: Tuple[float, float] = (-24.8, 2.0)
    horizontal_steps: int = 900
    range_max: float = 40.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.origin = tuple(float(c) for c in self.origin)
        self.vertical_fov = tuple(float(c) for c in self.vertical_fov)
        if self.layers < 1 or self.horizontal_steps < 1:
            raise SceneConfigError("scanner needs layers >= 1 and horizontal_steps >= 1")
        if not self.range_max > 0:
            raise SceneConfigError(f"range_max must be > 0, got {self.range_max}")
        if self.noise_sigma < 0:
            raise SceneConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def directions(self) -> np.ndarray:
        """Unit ray directions ordered by (layer, azimuth)."""
        elev = np.deg2rad(np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.layers))
        azim = 2.0 * np.pi * np.arange(self.horizontal_steps) / self.horizontal_steps
        e, a = np.meshgrid(elev, azim, indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)

    @property
    def angular_spacing(self) -> Tuple[float, float]:
        """(vertical, horizontal) angular step in radians."""
        v = 0.0 if self.layers == 1 else np.deg2rad(self.vertical_fov[1] - self.vertical_fov[0]) / (self.layers - 1)
        return v, 2.0 * np.pi / self.horizontal_steps


def scan(scene: Scene, spec: ScannerSpec, seed: int = 0) -> PointCloud:
    origin = np.asarray(spec.origin, dtype=np.float64)
    dirs = spec.directions()
    t = scene.intersect(origin, dirs)
    hit = t <= spec.range_max
    if spec.noise_sigma > 0:
        # one draw per ray, hit or not, so noise is tied to the ray order
        noise = np.random.default_rng(seed).normal(0.0, spec.noise_sigma, len(dirs))
        t = t + noise
    pts = origin + t[hit, None] * dirs[hit]
    return PointCloud(pts, origin.copy())


def ground_truth_cloud(scene: Scene, spec_dense: ScannerSpec) -> PointCloud:
    if spec_dense.noise_sigma != 0:
        raise SceneConfigError("ground-truth scanner must be noise-free")
    return scan(scene, spec_dense, seed=0)


def default_scene() -> Scene:
    """Ground plane, a car-sized box, a sphere and a wall, around a sensor 1.73 m up."""
    z0 = -1.73
    return Scene([
        GroundPlane(z0),
        Box((5.0, -3.5, z0), (9.5, -1.7, -0.3)),
        Sphere((7.0, 3.5, z0 + 1.2), 1.2),
        Box((-12.0, 6.0, z0), (4.0, 6.4, 1.5)),
    ])


def default_scanners(origin=(0.0, 0.0, 0.0), noise_sigma: float = 0.01) -> Tuple[ScannerSpec, ScannerSpec]:
    sparse = ScannerSpec(origin, 64, (-24.8, 2.0), 900, 40.0, noise_sigma)
    dense = ScannerSpec(origin, 316, (-24.8, 2.0), 1800, 40.0, 0.0)
    return sparse, dense


def load_synth_config(path) -> dict:
    """Read a JSON scene file: ``primitives`` plus optional ``sparse``/``dense`` scanners and ``seed``."""
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SceneConfigError(f"{path}: {e}") from None
    return parse_synth_config(raw)


def parse_synth_config(raw: dict) -> dict:
    scene = Scene.from_dict(raw) if "primitives" in raw else default_scene()
    sparse, dense = default_scanners()
    try:
        if "sparse" in raw:
            sparse = ScannerSpec(**{**asdict(sparse), **raw["sparse"]})
        if "dense" in raw:
            dense = ScannerSpec(**{**asdict(dense), **raw["dense"]})
    except TypeError as e:
        raise SceneConfigError(f"bad scanner block: {e}") from None
    return {"scene": scene, "sparse": sparse, "dense": dense, "seed": int(raw.get("seed", 0))}
