"""Command-line interface.

Subcommands: render, fit, extract, check-grad, bench-sort. Each takes a JSON
config (strict: unknown keys are rejected) and an optional output directory.
Exit codes: 0 success, 1 validation error, 2 numerical-check failure,
3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from .camera import camera_from_json, orbit_camera
from .field import (AnalyticShape, init_from_shape, load_checkpoint,
                    save_checkpoint, deform_limit_for)
from .fit import FitConfig, chamfer_distance, run_fit
from .grid import build_grid, marching_tetrahedra
from .gradcheck import MAX_RESOLUTION, check_gradients
from .imgio import save_maps
from .mesh import export_obj
from .raster import bin_and_sort, render_forward, render_reference
from .splat import EmptySceneError, build_scene


class ConfigError(ValueError):
    pass


def parse_shape(text) -> AnalyticShape:
    """Parse 'sphere:0.5', 'torus:0.5,0.2' or 'box:0.4,0.3,0.5'."""
    if isinstance(text, dict):
        return AnalyticShape(text["kind"], tuple(text["params"]),
                             tuple(text.get("center", (0.0, 0.0, 0.0))))
    try:
        kind, params = text.split(":")
        return AnalyticShape(kind, tuple(float(p) for p in params.split(",")))
    except (ValueError, AttributeError) as e:
        raise ConfigError(f"bad shape spec {text!r}: {e}") from None


def _check_keys(data: dict, allowed, where: str):
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _resolve_field(cfg, resolution):
    """Grid + field from either an analytic init or a checkpoint."""
    grid = build_grid(resolution)
    if cfg.get("checkpoint"):
        field = load_checkpoint(cfg["checkpoint"], deform_limit_for(grid))
        if len(field.sdf) != grid.num_vertices:
            raise ConfigError(
                f"checkpoint has {len(field.sdf)} vertices, grid has "
                f"{grid.num_vertices}; set 'resolution' to match")
    elif cfg.get("init"):
        field = init_from_shape(grid, parse_shape(cfg["init"]))
    else:
        raise ConfigError("render needs 'init' (e.g. \"sphere:0.5\") or 'checkpoint'")
    return grid, field


def cmd_render(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"camera", "resolution", "init", "checkpoint", "s",
                      "n_w", "reference", "name"}, "render config")
    resolution = int(cfg.get("resolution", 64))
    s = float(cfg.get("s", 200.0))
    grid, field = _resolve_field(cfg, resolution)
    if "camera" in cfg:
        camera = camera_from_json(cfg["camera"])
    else:
        camera = orbit_camera(0, 8)
    try:
        scene = build_scene(grid, field, camera, s)
    except EmptySceneError:
        scene = None
    if scene is None or len(scene) == 0:
        from .raster import RenderMaps
        maps = RenderMaps.zeros(camera.height, camera.width)
    elif cfg.get("reference"):
        maps = render_reference(scene, camera)
    else:
        bins = bin_and_sort(scene, camera)
        maps, _ = render_forward(scene, bins, camera,
                                 n_w=int(cfg.get("n_w", 5)))
    files = save_maps(out_dir, cfg.get("name", "render"), maps, camera)
    print("\n".join(files))
    return 0


_FIT_FIELDS = {f.name for f in dataclasses.fields(FitConfig)}


def fit_config_from_dict(data: dict) -> FitConfig:
    _check_keys(data, _FIT_FIELDS, "fit config")
    kwargs = dict(data)
    for key in ("betas", "elevation_range"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return FitConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def cmd_fit(cfg: dict, out_dir: str) -> int:
    extra = {"target", "init"}
    fit_part = {k: v for k, v in cfg.items() if k not in extra}
    config = fit_config_from_dict(fit_part)
    if "target" not in cfg:
        raise ConfigError("fit config needs a 'target' shape")
    target = parse_shape(cfg["target"])
    init = parse_shape(cfg["init"]) if "init" in cfg else None

    t0 = time.time()
    grid, field, trace = run_fit(target, config, init,
                                 trace_path=os.path.join(out_dir, "trace.jsonl"))
    mesh = marching_tetrahedra(grid, field)
    export_obj(mesh, os.path.join(out_dir, "mesh.obj"))
    save_checkpoint(field, os.path.join(out_dir, "checkpoint.tsp"))
    summary = {
        "chamfer": chamfer_distance(mesh, target),
        "cell_edge": grid.cell_edge,
        "euler_characteristic": mesh.euler_characteristic(),
        "watertight": mesh.is_watertight(),
        "final_loss": trace.final_loss,
        "final_s": trace.final_s,
        "iterations": config.iterations,
        "seconds": time.time() - t0,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_extract(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"resolution", "init", "checkpoint", "name"},
                "extract config")
    grid, field = _resolve_field(cfg, int(cfg.get("resolution", 64)))
    mesh = marching_tetrahedra(grid, field)
    path = os.path.join(out_dir, cfg.get("name", "mesh") + ".obj")
    export_obj(mesh, path)
    print(f"{path}: {len(mesh.vertices)} vertices, {len(mesh.triangles)} "
          f"triangles, euler {mesh.euler_characteristic()}, "
          f"watertight {mesh.is_watertight()}")
    return 0


def cmd_check_grad(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"resolutions", "image_size", "s", "seed", "h",
                      "deformation", "corrupt"}, "check-grad config")
    resolutions = cfg.get("resolutions", [4, 8])
    for r in resolutions:
        if r > MAX_RESOLUTION:
            raise ConfigError(
                f"resolution {r} refused: finite-difference sweep cost is "
                f"quadratic, maximum is {MAX_RESOLUTION}")
    ok = True
    for r in resolutions:
        t0 = time.time()
        rep = check_gradients(int(r), image_size=int(cfg.get("image_size", 32)),
                              s=float(cfg.get("s", 20.0)),
                              seed=int(cfg.get("seed", 0)),
                              h=float(cfg.get("h", 1e-4)),
                              deformation=bool(cfg.get("deformation", True)),
                              corrupt=bool(cfg.get("corrupt", False)))
        for kind in rep.max_rel_error:
            print(f"R={r} {kind}: max rel error {rep.max_rel_error[kind]:.3e} "
                  f"(tolerance {rep.tolerances[kind]:.0e}) "
                  f"[{time.time() - t0:.1f}s]")
        ok &= rep.passed
    print("PASS" if ok else "FAIL")
    return 0 if ok else 2


def cmd_bench_sort(cfg: dict, out_dir: str) -> int:
    _check_keys(cfg, {"resolutions", "windows", "image_size", "seed", "s"},
                "bench-sort config")
    resolutions = cfg.get("resolutions", [16, 32])
    windows = cfg.get("windows", [1, 3, 5, 9])
    image_size = int(cfg.get("image_size", 128))
    s = float(cfg.get("s", 100.0))
    rng = np.random.default_rng(int(cfg.get("seed", 0)))

    lines = ["resolution,window,max_abs,mean_abs,ms_per_frame"]
    for r in resolutions:
        grid = build_grid(int(r))
        field = init_from_shape(grid, AnalyticShape("sphere", (0.55,)))
        field.sdf = field.sdf + 0.05 * rng.standard_normal(grid.num_vertices)
        camera = orbit_camera(0, 8, width=image_size, height=image_size)
        scene = build_scene(grid, field, camera, s)
        bins = bin_and_sort(scene, camera)
        ref = render_reference(scene, camera)
        for w in windows:
            t0 = time.time()
            maps, _ = render_forward(scene, bins, camera, n_w=int(w))
            ms = (time.time() - t0) * 1000.0
            diff = np.concatenate([
                np.abs(maps.normal - ref.normal).ravel(),
                np.abs(maps.depth - ref.depth).ravel(),
                np.abs(maps.opacity - ref.opacity).ravel()])
            lines.append(f"{r},{w},{diff.max():.6e},{diff.mean():.6e},{ms:.2f}")
    csv = "\n".join(lines) + "\n"
    with open(os.path.join(out_dir, "bench_sort.csv"), "w") as fh:
        fh.write(csv)
    print(csv, end="")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tetsplat",
        description="Differentiable tetrahedron splatting on a deformable grid")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("render", "fit", "extract", "check-grad", "bench-sort"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        if name == "render":
            p.add_argument("--init", help="analytic init, e.g. sphere:0.5")
            p.add_argument("--s", type=float, help="sharpness override")
            p.add_argument("--reference", action="store_true",
                           help="use the exact-ordering oracle renderer")

    args = parser.parse_args(argv)
    handlers = {"render": cmd_render, "fit": cmd_fit, "extract": cmd_extract,
                "check-grad": cmd_check_grad, "bench-sort": cmd_bench_sort}
    try:
        cfg = load_config(args.config)
        if args.command == "render":
            if args.init:
                cfg["init"] = args.init
            if args.s is not None:
                cfg["s"] = args.s
            if args.reference:
                cfg["reference"] = True
        os.makedirs(args.out, exist_ok=True)
        return handlers[args.command](cfg, args.out)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
