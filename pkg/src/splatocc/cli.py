"""Command-line entry point: ``splatocc <command> ... --out DIR``.

Every command writes its artifacts plus ``manifest.json`` (config, config
hash, seed, metrics, digest of the produced state) into ``--out``. Exit code
2 means a configuration or input-format problem, 3 degenerate input.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, FormatError, PreconditionError
from .geometry import CameraRig
from .imageio import write_pfm, write_pgm
from .masks import DEFAULT_EROSION_RADIUS, compute_overlap_mask, erode
from .pipeline.bench import BENCH_RESOLUTIONS, bench_grid, benchmark
from .pipeline.config import FitConfig, build_manifest, canonical_json
from .pipeline.data import capture
from .pipeline.stage1 import fit_stage1
from .pipeline.stage2 import HIT_ACCUM, Renderer, evaluate_grid, fit_stage2
from .voxel_scene import SceneSpec, load_grid, save_grid

log = logging.getLogger("splatocc")

EXIT_CONFIG = 2
EXIT_DEGENERATE = 3


def _load_config(path, stage, overrides):
    data = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
    if data.get("stage", stage) != stage:
        raise ConfigurationError(f"config is for {data['stage']}, command needs {stage}")
    data["stage"] = stage
    data.update({k: v for k, v in overrides.items() if v is not None})
    return FitConfig.from_json(data)


def _write_manifest(out, manifest):
    with open(os.path.join(out, "manifest.json"), "w") as f:
        f.write(canonical_json(manifest))
        f.write("\n")


def _prepare_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _metrics_dict(m):
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in m.to_dict().items()}


def _iou_list(per_class):
    return [None if not np.isfinite(v) else float(v) for v in per_class]


# ---------------------------------------------------------------------------
# Commands


def cmd_fit_stage1(args):
    cfg = _load_config(args.config, "stage1", {"deterministic": True if args.deterministic else None,
                                                "iterations": args.iterations})
    rig, scene = CameraRig.load(args.rig), SceneSpec.load(args.scene)
    out = _prepare_out(args.out)
    state, metrics = fit_stage1(scene, rig, cfg, log=log.info)
    for k, d in enumerate(state.depths):
        write_pfm(os.path.join(out, f"depth_cam{k}.pfm"), d.filled(0.0))
    with open(os.path.join(out, "pose.json"), "w") as f:
        json.dump({"rotation": state.pose.rotation.reshape(-1).tolist(),
                   "translation": state.pose.translation.tolist()}, f, indent=2)
    result = {
        "depth": _metrics_dict(metrics),
        "depth_before_refine": _metrics_dict(state.metrics_before_refine),
        "depth_initial": _metrics_dict(state.metrics_initial),
        "regions": {k: _metrics_dict(v) for k, v in state.region_metrics.items()},
    }
    _write_manifest(out, build_manifest("fit-stage1", cfg, result, state.state_arrays()))
    print(json.dumps(result["depth"]))
    return 0


def cmd_fit_stage2(args):
    cfg = _load_config(args.config, "stage2", {"deterministic": True if args.deterministic else None,
                                                "iterations": args.iterations, "renderer": args.renderer,
                                                "supervision": args.supervision})
    rig, scene = CameraRig.load(args.rig), SceneSpec.load(args.scene)
    out = _prepare_out(args.out)
    data = capture(scene, rig)
    targets = None
    extra = {}
    if cfg.supervision == "stage1":
        s1_cfg = _load_config(args.stage1_config, "stage1", {})
        state, m1 = fit_stage1(scene, rig, s1_cfg, data=data, log=log.info)
        targets = (state.depths, None)
        extra["stage1"] = {"config_hash": s1_cfg.digest(), "depth": _metrics_dict(m1)}
    res = fit_stage2(scene, rig, cfg, data=data, depth_targets=targets, log=log.info)
    save_grid(res.grid, os.path.join(out, "grid.voxg"))
    result = {"depth": _metrics_dict(res.depth),
              "miou": {"per_class": _iou_list(res.per_class_iou), "mean": res.miou}}
    _write_manifest(out, build_manifest("fit-stage2", cfg, result, res.state_arrays(), extra or None))
    print(json.dumps(result))
    return 0


def _ray_overrides(args):
    return {"samples_per_ray": args.samples, "near": args.near, "far": args.far,
            "renderer": args.renderer, "gsv_scale": args.gsv_scale}


def cmd_render(args):
    cfg = _load_config(args.config, "stage2", _ray_overrides(args))
    grid, rig = load_grid(args.grid), CameraRig.load(args.rig)
    out = _prepare_out(args.out)
    renderer = Renderer(cfg)
    arrays = []
    for k, cam in enumerate(rig.cameras):
        res, _ = renderer.forward(grid, cam)
        sem = res.normalized_feature()
        depth = np.where(res.accum > HIT_ACCUM, res.normalized_depth(), 0.0)
        write_pfm(os.path.join(out, f"depth_cam{k}.pfm"), depth)
        # class probabilities as a 3-channel PFM (first three classes) plus the argmax map
        C = sem.shape[-1]
        rgb = np.zeros(sem.shape[:2] + (3,))
        rgb[..., : min(3, C)] = sem[..., : min(3, C)]
        write_pfm(os.path.join(out, f"feature_cam{k}.pfm"), rgb)
        write_pgm(os.path.join(out, f"accum_cam{k}.pgm"), np.clip(np.rint(res.accum * 255), 0, 255).astype(np.uint8))
        arrays += [depth, res.accum]
    _write_manifest(out, build_manifest("render", cfg, {"cameras": len(rig.cameras)}, arrays))
    return 0


def cmd_mask(args):
    rig = CameraRig.load(args.rig)
    rig.require_cross_view()
    out = _prepare_out(args.out)
    arrays, coverage = [], {}
    for i, j in rig.adjacency:
        m = compute_overlap_mask(rig.cameras[i], rig.cameras[j], args.samples, args.near, args.far)
        if args.erosion_radius:
            m = erode(m, args.erosion_radius)
        write_pgm(os.path.join(out, f"mask_{i}_{j}.pgm"), m)
        coverage[f"{i}_{j}"] = float(m.mean())
        arrays.append(m)
    _write_manifest(out, build_manifest("mask", None, {"coverage": coverage}, arrays,
                                        {"samples": args.samples, "near": args.near, "far": args.far,
                                         "erosion_radius": args.erosion_radius}))
    print(json.dumps(coverage))
    return 0


def _parse_resolutions(text):
    try:
        out = []
        for item in text.split(","):
            h, w = item.lower().split("x")
            out.append((int(h), int(w)))
        return tuple(out)
    except ValueError as exc:
        raise ConfigurationError(f"bad resolution list {text!r}; expected e.g. 180x320,360x640") from exc


def cmd_bench(args):
    rig = CameraRig.load(args.rig)
    if args.grid:
        grid = load_grid(args.grid)
    elif args.scene:
        grid = bench_grid(SceneSpec.load(args.scene))
    else:
        raise ConfigurationError("bench needs --grid or --scene")
    out = _prepare_out(args.out)
    report = benchmark(grid, rig, _parse_resolutions(args.resolutions), args.samples, args.repeats,
                       near=args.near, far=args.far, log=log.info)
    with open(os.path.join(out, "bench.json"), "w") as f:
        f.write(report.dumps())
    print(report.table())
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config, "stage2", _ray_overrides(args))
    grid, rig, scene = load_grid(args.grid), CameraRig.load(args.rig), SceneSpec.load(args.scene)
    out = _prepare_out(args.out)
    data = capture(scene, rig)
    metrics, mean, per_class = evaluate_grid(grid, scene, data, cfg)
    result = {"depth": _metrics_dict(metrics), "miou": {"per_class": _iou_list(per_class), "mean": mean}}
    with open(os.path.join(out, "metrics.json"), "w") as f:
        json.dump(result, f, indent=2)
    _write_manifest(out, build_manifest("eval", cfg, result, [grid.opacity_logits, grid.semantic_logits]))
    print(json.dumps(result))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    p = argparse.ArgumentParser(prog="splatocc", description="Splat and volume rendering of voxel occupancy, with cross-view depth fitting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, rig=True, scene=True, config=True):
        if rig:
            sp.add_argument("--rig", required=True, help="rig JSON")
        if scene:
            sp.add_argument("--scene", required=True, help="scene JSON")
        if config:
            sp.add_argument("--config", help="FitConfig JSON (defaults if omitted)")
        sp.add_argument("--out", required=True, help="output directory")

    def ray_flags(sp):
        sp.add_argument("--renderer", choices=("splat", "volume"))
        sp.add_argument("--samples", type=int, help="samples per ray (volume)")
        sp.add_argument("--near", type=float)
        sp.add_argument("--far", type=float)
        sp.add_argument("--gsv-scale", type=float, help="vertex Gaussian scale in meters (splat)")
        sp.add_argument("--deterministic", action="store_true",
                        help="fixed-order reductions (always on; recorded for provenance)")

    sp = sub.add_parser("fit-stage1", help="fit per-camera depth and ego pose")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_fit_stage1)

    sp = sub.add_parser("fit-stage2", help="fit a voxel grid by rendering it")
    common(sp)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--renderer", choices=("splat", "volume"))
    sp.add_argument("--supervision", choices=("oracle", "stage1"))
    sp.add_argument("--stage1-config", help="FitConfig JSON for the stage-1 run when --supervision stage1")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_fit_stage2)

    sp = sub.add_parser("render", help="render a grid into every rig camera")
    common(sp, scene=False)
    sp.add_argument("--grid", required=True, help="VOXG grid file")
    ray_flags(sp)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("mask", help="overlap mask per adjacent camera pair")
    common(sp, scene=False, config=False)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--near", type=float, default=0.5)
    sp.add_argument("--far", type=float, default=20.0)
    sp.add_argument("--erosion-radius", type=int, default=DEFAULT_EROSION_RADIUS)
    sp.set_defaults(func=cmd_mask)

    sp = sub.add_parser("bench", help="time splat vs volume rendering")
    common(sp, scene=False, config=False)
    sp.add_argument("--scene", help="scene JSON to voxelize into the benchmark grid")
    sp.add_argument("--grid", help="VOXG grid file (instead of --scene)")
    sp.add_argument("--resolutions", default=",".join(f"{h}x{w}" for h, w in BENCH_RESOLUTIONS))
    sp.add_argument("--samples", type=int, default=128)
    sp.add_argument("--near", type=float, default=0.5)
    sp.add_argument("--far", type=float, default=40.0)
    sp.add_argument("--repeats", type=int, default=5)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("eval", help="depth metrics and mIoU of a grid against a scene")
    common(sp)
    sp.add_argument("--grid", required=True, help="VOXG grid file")
    ray_flags(sp)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DegenerateInputError as exc:
        print(f"splatocc: degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConfigurationError, FormatError, PreconditionError, json.JSONDecodeError, FileNotFoundError,
            IsADirectoryError) as exc:
        print(f"splatocc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
