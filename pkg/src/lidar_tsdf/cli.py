"""Command-line entry point: ``lidar-tsdf {synth,reconstruct,eval}``.

Every command accepts ``--config FILE`` (JSON, keys named like the long
flags with dashes or underscores); explicit flags win over the file and the
merged result is recorded in the run manifest.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .fileio import CloudParseError, FORMATS, read_cloud, read_mesh, write_cloud, write_mesh
from .grid import InvalidPointError, StatGrid
from .imls import ImlsConfig, imls_tsdf
from .mesher import marching_cubes
from .metrics import EmptyPointSetError, evaluate
from .synth import SceneConfigError, ground_truth_cloud, load_synth_config, parse_synth_config, scan
from .tsdf import ConfigError, ReconstructionConfig, compute_tsdf

log = logging.getLogger("lidar_tsdf")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2

RECONSTRUCT_DEFAULTS = {
    "format": None,
    "alpha": 0.2,
    "tau": 0.2,
    "nmin": 10,
    "kmax": 5,
    "mode": "an-gc",
    "fixed_k": None,
    "method": "adaptive",
    "sensor": "0,0,0",
    "truncation": None,
    "confidence": "peak",
    "threads": 0,
    "imls_radius": None,
    "imls_h": None,
}

EVAL_DEFAULTS = {"sensor": "0,0,0", "bin_width": 1.0, "delta_step": 0.01, "delta_max": 1.0}

SYNTH_DEFAULTS = {"scene": None, "seed": None, "noise": None}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_vec3(text) -> tuple:
    if isinstance(text, (list, tuple)):
        vals = [float(v) for v in text]
    else:
        vals = [float(v) for v in str(text).split(",")]
    if len(vals) != 3 or not all(np.isfinite(vals)):
        raise ConfigError(f"expected x,y,z, got {text!r}")
    return tuple(vals)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _merge_config(args, defaults: dict) -> dict:
    merged = dict(defaults)
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        for key, value in raw.items():
            k = key.replace("-", "_")
            if k not in defaults:
                raise ConfigError(f"{args.config}: unknown key {key!r}")
            merged[k] = value
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


class _Timer:
    def __init__(self):
        self.ms = {}

    @contextmanager
    def stage(self, name):
        t0 = time.perf_counter()
        yield
        self.ms[name] = round((time.perf_counter() - t0) * 1000.0, 3)


def _write_manifest(path, command, config, inputs, outputs, timer):
    manifest = {
        "tool": "lidar-tsdf",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timings_ms": timer.ms,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def cmd_reconstruct(args) -> int:
    cfg = _merge_config(args, RECONSTRUCT_DEFAULTS)
    sensor = _parse_vec3(cfg["sensor"])
    if cfg["method"] not in ("adaptive", "imls"):
        raise ConfigError(f"unknown method {cfg['method']!r}")
    rcfg = ReconstructionConfig(
        alpha=float(cfg["alpha"]), tau=float(cfg["tau"]), n_min=int(cfg["nmin"]), k_max=int(cfg["kmax"]),
        mode=cfg["mode"], fixed_k=None if cfg["fixed_k"] is None else int(cfg["fixed_k"]),
        truncation=None if cfg["truncation"] is None else float(cfg["truncation"]), confidence=cfg["confidence"],
    )
    timer = _Timer()
    with timer.stage("read"):
        cloud = read_cloud(args.input, cfg["format"], sensor)
    if len(cloud) == 0:
        raise ConfigError(f"{args.input}: no finite points")
    with timer.stage("grid"):
        grid = StatGrid.from_points(cloud.points, rcfg.alpha, sensor)
    resolved = {"input": str(args.input), "output": str(args.output), **cfg, "sensor": list(sensor),
                "reconstruction": rcfg.to_dict()}
    with timer.stage("tsdf"):
        if cfg["method"] == "adaptive":
            field = compute_tsdf(grid, rcfg, threads=int(cfg["threads"]))
        else:
            icfg = ImlsConfig.matching(rcfg.alpha, rcfg.k_max, rcfg.n_min, rcfg.truncation)
            if cfg["imls_radius"] is not None or cfg["imls_h"] is not None:
                radius = icfg.radius if cfg["imls_radius"] is None else float(cfg["imls_radius"])
                h = radius / 3.0 if cfg["imls_h"] is None else float(cfg["imls_h"])
                icfg = replace(icfg, radius=radius, h=h)
            resolved["imls"] = icfg.to_dict()
            field = imls_tsdf(cloud.points, grid, icfg, rcfg.k_max)
    with timer.stage("mesh"):
        mesh = marching_cubes(field)
    with timer.stage("write"):
        write_mesh(mesh, args.output)
    manifest_path = args.manifest or f"{args.output}.manifest.json"
    _write_manifest(manifest_path, "reconstruct", resolved, [args.input], {"mesh": args.output}, timer)
    print(f"{args.output}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} triangles "
          f"({int(np.isfinite(field.values).sum())} defined TSDF vertices)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _merge_config(args, EVAL_DEFAULTS)
    sensor = _parse_vec3(cfg["sensor"])
    step, top = float(cfg["delta_step"]), float(cfg["delta_max"])
    if not (step > 0 and top >= 0):
        raise ConfigError("delta_step must be > 0 and delta_max >= 0")
    thresholds = tuple(np.round(np.arange(0, int(round(top / step)) + 1) * step, 10).tolist())
    timer = _Timer()
    with timer.stage("read"):
        pred = read_mesh(args.mesh).vertices
        gt = read_cloud(args.gt, args.gt_format).points
    with timer.stage("metrics"):
        report = evaluate(pred, gt, sensor, thresholds, float(cfg["bin_width"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "delta": out / "delta_curve.csv", "range": out / "range_profile.csv",
             "summary": out / "summary.txt"}
    paths["metrics"].write_text(report.metrics_csv())
    paths["delta"].write_text(report.delta_csv())
    paths["range"].write_text(report.range_csv())
    paths["summary"].write_text(report.summary() + "\n")
    resolved = {"mesh": str(args.mesh), "gt": str(args.gt), **cfg, "sensor": list(sensor)}
    _write_manifest(out / "manifest.json", "eval", resolved, [args.mesh, args.gt], paths, timer)
    print(report.summary())
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _merge_config(args, SYNTH_DEFAULTS)
    synth = load_synth_config(cfg["scene"]) if cfg["scene"] else parse_synth_config({})
    seed = synth["seed"] if cfg["seed"] is None else int(cfg["seed"])
    sparse = synth["sparse"]
    if cfg["noise"] is not None:
        sparse = replace(sparse, noise_sigma=float(cfg["noise"]))
    timer = _Timer()
    with timer.stage("sparse"):
        cloud = scan(synth["scene"], sparse, seed)
    with timer.stage("dense"):
        gt = ground_truth_cloud(synth["scene"], synth["dense"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"sparse": out / "sparse.ply", "gt": out / "gt.ply"}
    write_cloud(cloud.points, paths["sparse"])
    write_cloud(gt.points, paths["gt"])
    resolved = {
        **synth["scene"].to_dict(),
        "sparse": vars(sparse).copy(),
        "dense": vars(synth["dense"]).copy(),
        "seed": seed,
    }
    inputs = [cfg["scene"]] if cfg["scene"] else []
    _write_manifest(out / "manifest.json", "synth", resolved, inputs, paths, timer)
    print(f"sparse: {len(cloud)} points -> {paths['sparse']}\ndense: {len(gt)} points -> {paths['gt']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lidar-tsdf", description="Adaptive-neighborhood TSDF surface reconstruction for Lidar scans.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("reconstruct", help="point cloud -> TSDF -> PLY mesh")
    r.add_argument("input")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--config")
    r.add_argument("--manifest", help="manifest path (default: <output>.manifest.json)")
    r.add_argument("--format", choices=FORMATS)
    r.add_argument("--alpha", type=float, help="voxel size in meters (0.2)")
    r.add_argument("--tau", type=float, help="confidence threshold (0.2)")
    r.add_argument("--nmin", type=int, help="minimum points per neighborhood (10)")
    r.add_argument("--kmax", type=int, help="largest neighborhood level (5)")
    r.add_argument("--mode", choices=["an-gc", "an", "cn-gc", "cn"])
    r.add_argument("--fixed-k", type=int, help="level used by the cn modes (default kmax)")
    r.add_argument("--method", choices=["adaptive", "imls"])
    r.add_argument("--sensor", help="sensor position x,y,z (0,0,0)")
    r.add_argument("--truncation", type=float, help="truncation band in meters (alpha*kmax)")
    r.add_argument("--confidence", choices=["peak", "raw"])
    r.add_argument("--threads", type=int, help="worker cap, 0 = auto")
    r.add_argument("--imls-radius", type=float)
    r.add_argument("--imls-h", type=float)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="compare mesh vertices against a ground-truth cloud")
    e.add_argument("--mesh", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--gt-format", choices=FORMATS)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--config")
    e.add_argument("--sensor")
    e.add_argument("--bin-width", type=float)
    e.add_argument("--delta-step", type=float)
    e.add_argument("--delta-max", type=float)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="synthetic sparse scan + dense ground truth")
    s.add_argument("--scene", help="JSON scene file (default scene if omitted)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--noise", type=float, help="range noise sigma of the sparse scan")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"lidar-tsdf: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SceneConfigError, CloudParseError, InvalidPointError, EmptyPointSetError, ValueError) as e:
        print(f"lidar-tsdf: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"lidar-tsdf: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
