"""Command-line interface: generation, rendering, fitting, and exports.

Exit codes: 0 success, 1 user error (arguments, files, configuration),
2 numerical failure.  stdout carries exactly one machine-readable JSON
summary per invocation; diagnostics and warnings go to stderr.

Environment overrides: ``FIBERWEAVE_THREADS`` supplies the default for
``--threads``; ``FIBERWEAVE_CACHE_DIR`` relocates the JIT compilation
cache (effective when the CLI is the process entry point).  All file
formats are documented in ``docs/formats.md``.
"""

from __future__ import annotations

import os

if os.environ.get("FIBERWEAVE_CACHE_DIR") and not os.environ.get(
        "NUMBA_CACHE_DIR"):
    os.environ["NUMBA_CACHE_DIR"] = os.environ["FIBERWEAVE_CACHE_DIR"]

import argparse
import dataclasses
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from .fibers import generate_patch
from .fit import (
    FitConfig,
    FitError,
    FitSeeds,
    GradientConfig,
    Stage2Config,
    Stage3Config,
    init_params,
    stage_joint,
    stage_refine,
)
from .imgio import read_pfm, read_png, load_obj, write_png
from .tracer import MacroScene, luminance, render, scene_for, set_threads
from .weave import (
    PATTERN_KINDS,
    ConfigError,
    FabricConfig,
    FabricSpec,
    default_config,
    pattern_matrix,
    sample_fabric_config,
)

ENV_THREADS = "FIBERWEAVE_THREADS"
ENV_CACHE = "FIBERWEAVE_CACHE_DIR"

_CURVES_MAGIC = "fiberweave-curves 1"


class _UsageError(Exception):
    """Bad command line; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); 2 means numerical
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# config (de)serialization
# ---------------------------------------------------------------------------

def _replaced(obj, updates: dict, label: str):
    """dataclasses.replace with unknown-key checking and list -> tuple."""
    names = {f.name for f in dataclasses.fields(obj)}
    clean = {}
    for key, val in updates.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in {label}")
        if isinstance(val, list):
            val = tuple(val)
        if key == "m":
            val = int(round(val))
        clean[key] = val
    return dataclasses.replace(obj, **clean)


def config_to_dict(cfg: FabricConfig) -> dict:
    """Full, human-diffable dictionary form of a fabric configuration."""
    fab = cfg.fabric
    return {
        "kind": cfg.kind,
        "fabric": {"L_h": fab.L_h, "L_v": fab.L_v,
                   "n_h": fab.n_h, "n_v": fab.n_v},
        "geometry": {
            "weft": dataclasses.asdict(cfg.geometry.weft),
            "warp": dataclasses.asdict(cfg.geometry.warp),
            "gap_factor": cfg.geometry.gap_factor,
            "fiber_radius_scale": cfg.geometry.fiber_radius_scale,
            "noise_z_scale": cfg.geometry.noise_z_scale,
        },
        "appearance": {
            "weft": dataclasses.asdict(cfg.appearance.weft),
            "warp": dataclasses.asdict(cfg.appearance.warp),
            "shared": {"w_d": cfg.appearance.shared.w_d},
        },
        "capture": dataclasses.asdict(cfg.capture),
        "seed": cfg.seed,
    }


def config_from_dict(data: dict) -> FabricConfig:
    """Inverse of config_to_dict; missing keys fall back to the preset."""
    if not isinstance(data, dict) or "kind" not in data:
        raise ConfigError("config must be an object with a 'kind' entry")
    known = {"kind", "fabric", "geometry", "appearance", "capture", "seed"}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config section {key!r}")
    cfg = default_config(data["kind"], seed=int(data.get("seed", 0)))

    fab = dict(data.get("fabric", {}))
    if fab:
        cur = cfg.fabric
        vals = {}
        for key in ("L_h", "L_v", "n_h", "n_v"):
            vals[key] = fab.pop(key, getattr(cur, key))
        if fab:
            raise ConfigError(f"unknown key {next(iter(fab))!r} in fabric")
        cfg = dataclasses.replace(cfg, fabric=FabricSpec(
            pattern_matrix(cfg.kind), vals["L_h"], vals["L_v"],
            int(vals["n_h"]), int(vals["n_v"])))

    geo = dict(data.get("geometry", {}))
    if geo:
        g = cfg.geometry
        for axis in ("weft", "warp"):
            if axis in geo:
                g = dataclasses.replace(g, **{axis: _replaced(
                    g.axis(axis), geo.pop(axis), f"geometry.{axis}")})
        g = _replaced(g, geo, "geometry")
        cfg = dataclasses.replace(cfg, geometry=g)

    app = dict(data.get("appearance", {}))
    if app:
        a = cfg.appearance
        for axis in ("weft", "warp"):
            if axis in app:
                a = dataclasses.replace(a, **{axis: _replaced(
                    a.axis(axis), app.pop(axis), f"appearance.{axis}")})
        if "shared" in app:
            a = dataclasses.replace(a, shared=_replaced(
                a.shared, app.pop("shared"), "appearance.shared"))
        if app:
            raise ConfigError(f"unknown key {next(iter(app))!r} in appearance")
        cfg = dataclasses.replace(cfg, appearance=a)

    cap = data.get("capture", {})
    if cap:
        cfg = dataclasses.replace(cfg,
                                  capture=_replaced(cfg.capture, cap,
                                                    "capture"))
    return cfg


def load_config(source: str) -> FabricConfig:
    """A preset name ("plain", "satin", ...) or a JSON config file path."""
    if source in PATTERN_KINDS:
        return default_config(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(
            f"{source!r} is neither a pattern preset {PATTERN_KINDS} "
            f"nor an existing config file")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(path, cfg: FabricConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# curve file formats
# ---------------------------------------------------------------------------

def write_curves(path, patch) -> None:
    """Fiber-curve text format (one polyline per fiber, wrap-closed)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_CURVES_MAGIC}\n")
        fh.write(f"extent {patch.extent[0]!r} {patch.extent[1]!r}\n")
        fh.write(f"density {patch.density} seed {patch.seed}\n")
        fh.write(f"counts {patch.n_curves} {patch.n_vertices} "
                 f"{patch.n_capsules}\n")
        for c in range(patch.n_curves):
            a, b = patch.curve_first[c], patch.curve_first[c + 1]
            fh.write(f"curve {int(patch.curve_axis[c])} "
                     f"{int(patch.curve_yarn[c])} "
                     f"{int(patch.curve_fiber[c])} "
                     f"{float(patch.curve_radius[c])!r} {b - a}\n")
            for x, y, z in patch.vertices[a:b]:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def read_curves(path) -> dict:
    """Parse the fiber-curve text format back into plain arrays."""
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() != _CURVES_MAGIC:
            raise ConfigError(f"{path} is not a fiber-curve file")
        ex, ey = map(float, fh.readline().split()[1:3])
        tok = fh.readline().split()
        density, seed = int(tok[1]), int(tok[3])
        tok = fh.readline().split()
        n_curves, n_vertices, n_segments = map(int, tok[1:4])
        axis = np.empty(n_curves, dtype=np.int64)
        yarn = np.empty(n_curves, dtype=np.int64)
        fiber = np.empty(n_curves, dtype=np.int64)
        radius = np.empty(n_curves)
        first = np.zeros(n_curves + 1, dtype=np.int64)
        verts = np.empty((n_vertices, 3))
        at = 0
        for c in range(n_curves):
            tok = fh.readline().split()
            if not tok or tok[0] != "curve":
                raise ConfigError(f"{path}: malformed curve header {c}")
            axis[c], yarn[c], fiber[c] = int(tok[1]), int(tok[2]), int(tok[3])
            radius[c] = float(tok[4])
            nv = int(tok[5])
            for _ in range(nv):
                verts[at] = [float(v) for v in fh.readline().split()]
                at += 1
            first[c + 1] = at
    if at != n_vertices:
        raise ConfigError(f"{path}: vertex count mismatch")
    return {"extent": (ex, ey), "density": density, "seed": seed,
            "n_segments": n_segments, "curve_axis": axis,
            "curve_yarn": yarn, "curve_fiber": fiber,
            "curve_radius": radius, "curve_first": first,
            "vertices": verts}


def _write_curves_obj(path, curves: dict) -> None:
    """Wavefront OBJ polylines ('v' + 'l' records), 1-based indices."""
    verts = curves["vertices"]
    first = curves["curve_first"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# fiberweave fiber centerlines\n")
        for x, y, z in verts:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for c in range(len(first) - 1):
            idx = " ".join(str(i + 1) for i in range(first[c], first[c + 1]))
            fh.write(f"l {idx}\n")


def _write_curves_csv(path, curves: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("curve,axis,yarn,fiber,radius,x,y,z\n")
        first = curves["curve_first"]
        for c in range(len(first) - 1):
            meta = (f"{c},{int(curves['curve_axis'][c])},"
                    f"{int(curves['curve_yarn'][c])},"
                    f"{int(curves['curve_fiber'][c])},"
                    f"{float(curves['curve_radius'][c])!r}")
            for x, y, z in curves["vertices"][first[c]:first[c + 1]]:
                fh.write(f"{meta},{float(x)!r},{float(y)!r},{float(z)!r}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _apply_threads(args) -> int:
    n = args.threads
    if n is None:
        env = os.environ.get(ENV_THREADS, "")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ConfigError("--threads must be >= 1")
        return set_threads(n)
    import numba

    return numba.get_num_threads()


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ConfigError(f"--size must look like 256x256, got {text!r}") \
            from None


def _load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"image {path} does not exist")
    if path.suffix == ".npy":
        img = np.load(path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ConfigError(f"{path} is not an (H, W, 3) image array")
        return np.asarray(img, dtype=np.float64)
    if path.suffix == ".pfm":
        return read_pfm(path)
    if path.suffix == ".png":
        return read_png(path)
    raise ConfigError(f"unsupported image format {path.suffix!r} "
                      "(use .npy, .pfm, or .png)")


def _fabric_fiber_count(cfg: FabricConfig) -> int:
    return (cfg.fabric.n_h * cfg.geometry.weft.m
            + cfg.fabric.n_v * cfg.geometry.warp.m)


def _sidecar(path, payload: dict) -> str:
    side = str(Path(path).with_suffix(".json"))
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return side


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> dict:
    threads = _apply_threads(args)
    cfg = load_config(args.config)
    patch = generate_patch(cfg, args.density, seed=args.seed)
    write_curves(args.out, patch)
    unique_vertices = patch.n_vertices - patch.n_curves
    summary = {
        "command": "generate",
        "out": str(args.out),
        "pattern": cfg.kind,
        "density": args.density,
        "fibers_patch": patch.n_curves,
        "vertices": unique_vertices,
        "segments": patch.n_capsules,
        "patch_extent_cells": list(patch.extent),
        "fabric_fibers": _fabric_fiber_count(cfg),
        "patch_bytes": patch.nbytes,
        "threads": threads,
    }
    print(f"{patch.n_curves} fibers, {unique_vertices} vertices, "
          f"{patch.n_capsules} segments; "
          f"~{summary['fabric_fibers']} fibers across the fabric",
          file=sys.stderr)
    return summary


def _scene_for_args(cfg, args):
    if getattr(args, "mesh", None):
        mesh_path = Path(args.mesh)
        if not mesh_path.exists():
            raise ConfigError(f"mesh {mesh_path} does not exist")
        verts, faces, uv = load_obj(mesh_path)
        cell = float(np.mean(cfg.fabric.cell_size_cm))
        return MacroScene.mesh_from(verts, faces, uv, cell)
    return scene_for(cfg)


def cmd_render(args) -> dict:
    threads = _apply_threads(args)
    cfg = load_config(args.config)
    if args.size:
        cfg = dataclasses.replace(cfg, capture=dataclasses.replace(
            cfg.capture, image_size=_parse_size(args.size)))
    scene = _scene_for_args(cfg, args)
    patch = generate_patch(cfg, args.density, seed=args.seed)
    t0 = time.perf_counter()
    img = render(scene, patch, cfg.capture, args.spp, args.depth,
                 seed=args.seed, appearance=cfg.appearance)
    seconds = time.perf_counter() - t0
    if not np.all(np.isfinite(img)):
        raise FitError("render produced non-finite pixels")
    out_png = Path(args.out)
    out_npy = out_png.with_suffix(".npy")
    write_png(out_png, img)
    np.save(out_npy, img)
    w, h = cfg.capture.image_size
    summary = {
        "command": "render",
        "png": str(out_png),
        "float_image": str(out_npy),
        "size": [w, h],
        "spp": args.spp,
        "max_depth": args.depth,
        "seconds": round(seconds, 3),
        "paths_per_pixel": args.spp,
        "paths_total": args.spp * w * h,
        "mean_rgb": [float(m) for m in img.mean(axis=(0, 1))],
        "mean_luminance": float(luminance(img).mean()),
        "threads": threads,
        "seed": args.seed,
    }
    _sidecar(out_png, {"config": str(args.config),
                       "config_resolved": config_to_dict(cfg),
                       **{k: summary[k] for k in
                          ("spp", "max_depth", "seed", "size", "seconds",
                           "float_image", "threads")}})
    print(f"rendered {w}x{h} at {args.spp} spp in {seconds:.1f}s",
          file=sys.stderr)
    return summary


def _result_payload(res) -> dict:
    return {
        "stage": res.stage,
        "names": list(res.params.names),
        "values": [float(v) for v in res.params.values],
        "history": [float(x) for x in res.history],
        "initial_loss": res.initial_loss,
        "final_loss": res.final_loss,
        "wall_time": res.wall_time,
        "n_evals": res.n_evals,
    }


def _write_report(path, target_path, cfg, results: dict) -> None:
    lines = ["fiberweave fit report",
             f"target: {target_path}",
             f"pattern: {cfg.kind}", ""]
    for stage, res in sorted(results.items()):
        lines.append(
            f"stage {stage}: iterations={len(res.history) - 1} "
            f"initial={res.initial_loss:.6g} final={res.final_loss:.6g} "
            f"wall={res.wall_time:.1f}s evals={res.n_evals}")
    last = results[max(results)]
    lo, hi = last.params.bounds
    lines += ["", "parameters (* = optimized in final stage):"]
    for i, name in enumerate(last.params.names):
        mark = "*" if last.params.active[i] else " "
        bound = (f" in [{lo[i]:g}, {hi[i]:g}]"
                 if np.isfinite(lo[i]) else "")
        lines.append(f" {mark} {name:18s} {last.params.values[i]: .6g}"
                     f"{bound}")
    for stage, res in sorted(results.items()):
        lines += ["", f"loss history, stage {stage} "
                      "(initial, then per-iteration probe means):"]
        lines += [f"  {t:3d} {x:.6g}" for t, x in enumerate(res.history)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_fit(args) -> dict:
    threads = _apply_threads(args)
    cfg = load_config(args.config)
    target = _load_image(args.target)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    overrides = {}
    for item in args.set or ():
        name, _, value = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects name=value, got {item!r}")
        overrides[name] = float(value)
    p0 = init_params(cfg.kind, overrides or None, base=cfg)

    h, w = target.shape[:2]
    fcfg = FitConfig(
        stage2=Stage2Config(iterations=args.iterations2, spp=args.spp2,
                            image_size=(w, h), supersample=args.supersample),
        stage3=Stage3Config(iterations=args.iterations3,
                            spp_forward=args.spp3),
        gradient=GradientConfig(estimator=args.estimator,
                                perturbation=args.perturbation,
                                samples=args.samples,
                                calibrate=not args.no_calibrate),
        seeds=FitSeeds(geometry=args.seed, render=args.seed + 1,
                       gradient=args.seed + 2, bank=0),
        density=args.density,
        snapshot_every=args.snapshot_every,
    )

    results = {}
    stage2_json = out_dir / "stage2_result.json"
    if args.stage in ("2", "both"):
        res2 = stage_joint(target, p0, fcfg,
                           checkpoint=str(out_dir / "stage2.ckpt"))
        results[2] = res2
        with open(stage2_json, "w", encoding="utf-8") as fh:
            json.dump(_result_payload(res2), fh, indent=2)
        save_config(out_dir / "config_stage2.json", res2.params.to_config())
        p1 = res2.params
    elif stage2_json.exists():
        with open(stage2_json, encoding="utf-8") as fh:
            payload = json.load(fh)
        p1 = p0.replace_values(np.asarray(payload["values"]))
        print(f"resuming from {stage2_json}", file=sys.stderr)
    else:
        warnings.warn(
            "no joint-stage result found; refining directly from the "
            "initial parameters (geometry stays at its starting values)",
            stacklevel=2)
        p1 = p0

    if args.stage in ("3", "both"):
        res3 = stage_refine(target, p1, fcfg,
                            checkpoint=str(out_dir / "stage3.ckpt"))
        results[3] = res3
        with open(out_dir / "stage3_result.json", "w",
                  encoding="utf-8") as fh:
            json.dump(_result_payload(res3), fh, indent=2)
        save_config(out_dir / "recovered_config.json",
                    res3.params.to_config())

    for stage, res in results.items():
        for t, img in res.snapshots:
            write_png(out_dir / f"stage{stage}_iter{t:04d}.png", img)

    _write_report(out_dir / "report.txt", args.target, cfg, results)
    summary = {
        "command": "fit",
        "out_dir": str(out_dir),
        "threads": threads,
        "stages": {str(s): {"initial_loss": r.initial_loss,
                            "final_loss": r.final_loss,
                            "wall_time": round(r.wall_time, 2),
                            "n_evals": r.n_evals}
                   for s, r in results.items()},
    }
    last = results[max(results)]
    summary["params"] = {n: float(v) for n, v in
                         zip(last.params.names, last.params.values)}
    return summary


def cmd_sample_dataset(args) -> dict:
    threads = _apply_threads(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    size = _parse_size(args.size) if args.size else None
    pairs = []
    for i in range(args.count):
        cfg = sample_fabric_config(args.pattern, rng, seed=args.seed + i)
        if size:
            cfg = dataclasses.replace(cfg, capture=dataclasses.replace(
                cfg.capture, image_size=size))
        stem = f"{args.pattern}_{i:04d}"
        save_config(out_dir / f"{stem}.json", cfg)
        patch = generate_patch(cfg, args.density, seed=args.seed + i)
        img = render(scene_for(cfg), patch, cfg.capture, args.spp,
                     seed=args.seed + i, appearance=cfg.appearance)
        write_png(out_dir / f"{stem}.png", img)
        np.save(out_dir / f"{stem}.npy", img)
        pairs.append({"config": f"{stem}.json", "png": f"{stem}.png",
                      "float_image": f"{stem}.npy"})
        print(f"[{i + 1}/{args.count}] {stem}", file=sys.stderr)
    return {"command": "sample-dataset", "pattern": args.pattern,
            "count": args.count, "out_dir": str(out_dir), "spp": args.spp,
            "threads": threads, "pairs": pairs}


def cmd_export_curves(args) -> dict:
    threads = _apply_threads(args)
    src = Path(args.source)
    if src.exists() and src.suffix != ".json":
        with open(src, encoding="utf-8") as fh:
            is_curves = fh.readline().strip() == _CURVES_MAGIC
        if not is_curves:
            raise ConfigError(f"{src} is not a fiber-curve file")
        curves = read_curves(src)
    else:
        cfg = load_config(args.source)
        patch = generate_patch(cfg, args.density, seed=args.seed)
        tmp = {"vertices": patch.vertices, "curve_first": patch.curve_first,
               "curve_axis": patch.curve_axis, "curve_yarn": patch.curve_yarn,
               "curve_fiber": patch.curve_fiber,
               "curve_radius": patch.curve_radius}
        curves = tmp
    if args.format == "obj":
        _write_curves_obj(args.out, curves)
    else:
        _write_curves_csv(args.out, curves)
    n_curves = len(curves["curve_first"]) - 1
    return {"command": "export-curves", "out": str(args.out),
            "format": args.format, "curves": n_curves,
            "vertices": int(len(curves["vertices"])), "threads": threads}


def cmd_inspect(args) -> dict:
    path = Path(args.source)
    if args.source in PATTERN_KINDS or (path.exists()
                                        and path.suffix == ".json"):
        if args.source in PATTERN_KINDS:
            data = config_to_dict(default_config(args.source))
        else:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        if "kind" in data:
            cfg = config_from_dict(data)
            return {"command": "inspect", "type": "config",
                    "pattern": cfg.kind,
                    "yarns": cfg.fabric.n_h + cfg.fabric.n_v,
                    "cell_size_cm": list(cfg.fabric.cell_size_cm),
                    "fabric_fibers": _fabric_fiber_count(cfg),
                    "image_size": list(cfg.capture.image_size)}
        if "stage" in data and "adam_m" in data:
            return {"command": "inspect", "type": "checkpoint",
                    "stage": data["stage"], "iteration": data["iteration"],
                    "loss_initial": data["history"][0],
                    "loss_last": data["history"][-1],
                    "elapsed": data["elapsed"]}
        if "values" in data and "names" in data:
            return {"command": "inspect", "type": "fit-result",
                    "stage": data.get("stage"),
                    "initial_loss": data.get("initial_loss"),
                    "final_loss": data.get("final_loss"),
                    "iterations": len(data.get("history", [])) - 1}
        raise ConfigError(f"{path}: unrecognized JSON artifact")
    if not path.exists():
        raise ConfigError(f"{path} does not exist")
    if path.suffix in (".npy", ".pfm", ".png"):
        img = _load_image(path)
        return {"command": "inspect", "type": "image",
                "size": [img.shape[1], img.shape[0]],
                "mean_rgb": [float(m) for m in img.mean(axis=(0, 1))],
                "min": float(img.min()), "max": float(img.max()),
                "mean_luminance": float(luminance(img).mean())}
    with open(path, encoding="utf-8") as fh:
        if fh.readline().strip() == _CURVES_MAGIC:
            curves = read_curves(path)
            return {"command": "inspect", "type": "curves",
                    "fibers": int(len(curves["curve_first"]) - 1),
                    "vertices": int(len(curves["vertices"])),
                    "segments": curves["n_segments"],
                    "density": curves["density"], "seed": curves["seed"],
                    "extent": list(curves["extent"])}
    raise ConfigError(f"cannot identify artifact type of {path}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--seed", type=int, default=0,
                   help="base RNG seed (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"renderer threads (default ${ENV_THREADS} or all)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fiberweave",
                     description="Fiber-level woven fabric toolkit")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="generate a fiber-curve patch file")
    p.add_argument("config", help="pattern preset name or config JSON path")
    p.add_argument("--density", type=int, default=40, choices=(10, 40),
                   help="curve sampling density (default 40)")
    p.add_argument("--out", required=True, help="output curve file")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("render", help="render a fabric to PNG + float image")
    p.add_argument("config")
    p.add_argument("--spp", type=int, default=1024,
                   help="paths per pixel (default 1024)")
    p.add_argument("--depth", type=int, default=64,
                   help="maximum path depth (default 64)")
    p.add_argument("--size", default=None, help="image size WxH")
    p.add_argument("--density", type=int, default=40, choices=(10, 40))
    p.add_argument("--mesh", default=None,
                   help="OBJ mesh for a draped render (plane if omitted)")
    p.add_argument("--out", required=True, help="output PNG path")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit", help="recover fabric parameters from an image")
    p.add_argument("target", help="target image (.npy, .pfm, or .png)")
    p.add_argument("config", help="preset or config JSON giving start values")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", choices=("2", "3", "both"), default="both")
    p.add_argument("--iterations2", type=int, default=75)
    p.add_argument("--iterations3", type=int, default=50)
    p.add_argument("--spp2", type=int, default=4,
                   help="joint-stage forward spp (default 4)")
    p.add_argument("--supersample", type=int, default=2)
    p.add_argument("--spp3", type=int, default=256,
                   help="refinement forward spp (default 256)")
    p.add_argument("--estimator", choices=("spsa", "central"),
                   default="spsa")
    p.add_argument("--samples", type=int, default=1,
                   help="SPSA draws per gradient")
    p.add_argument("--perturbation", type=float, default=0.02)
    p.add_argument("--no-calibrate", action="store_true",
                   help="disable per-parameter probe calibration")
    p.add_argument("--density", type=int, default=10, choices=(10, 40))
    p.add_argument("--snapshot-every", type=int, default=0)
    p.add_argument("--set", action="append", metavar="NAME=VALUE",
                   help="override a starting parameter (repeatable)")
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample-dataset",
                       help="draw (config, render) training pairs")
    p.add_argument("pattern")
    p.add_argument("count", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--spp", type=int, default=64)
    p.add_argument("--size", default=None, help="render size WxH")
    p.add_argument("--density", type=int, default=10, choices=(10, 40))
    _add_common(p)
    p.set_defaults(func=cmd_sample_dataset)

    p = sub.add_parser("export-curves",
                       help="convert fibers to OBJ polylines or CSV")
    p.add_argument("source", help="preset, config JSON, or curve file")
    p.add_argument("--format", choices=("obj", "csv"), default="obj")
    p.add_argument("--density", type=int, default=40, choices=(10, 40))
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_export_curves)

    p = sub.add_parser("inspect", help="summarize any fiberweave artifact")
    p.add_argument("source")
    _add_common(p)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        summary = args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FitError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
