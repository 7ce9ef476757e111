"""Command-line entry point: ``meshsplat {train,render,stats,check-grad,make-scene}``.

Exit codes: 0 success, 1 verification or runtime failure, 2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import kernels
from .losses import LossWeights, psnr
from .mesh import MeshBvh, MeshError, load_mesh, point_to_mesh_distance
from .ply import PlyError
from .scenes import (CheckpointError, DatasetError, SceneSpec, depth_maps, linear_to_srgb, load_checkpoint,
                     load_dataset, make_synthetic_scene, quantize, read_image, save_checkpoint, write_image)
from .splats import classify_splats

log = logging.getLogger("meshsplat")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def config_keys() -> dict:
    """Dotted key -> default for every TrainConfig and LossWeights field."""
    from .trainer import TrainConfig
    base = TrainConfig()
    keys = {}
    for f in fields(TrainConfig):
        if f.name == "weights":
            for g in fields(LossWeights):
                keys[f"weights.{g.name}"] = getattr(base.weights, g.name)
        else:
            keys[f.name] = getattr(base, f.name)
    return keys


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def build_config(config_path=None, overrides=None):
    """Merge defaults, a JSON config file and flag overrides (in that order)."""
    from .trainer import TrainConfig
    keys = config_keys()
    merged = dict(keys)
    sources = []
    if config_path is not None:
        try:
            data = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        sources.append(flatten(data))
    sources.append(dict(overrides or {}))
    for src in sources:
        unknown = sorted(set(src) - set(keys))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        merged.update(src)
    weights = {k.split(".", 1)[1]: v for k, v in merged.items() if k.startswith("weights.")}
    top = {k: v for k, v in merged.items() if not k.startswith("weights.")}
    try:
        return TrainConfig(weights=LossWeights(**weights), **top), merged
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def _json_float(x):
    return x if math.isfinite(x) else ("inf" if x > 0 else "nan")


def cmd_train(args) -> int:
    from .trainer import train
    overrides = dict(parse_override(s) for s in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["num_threads"] = args.threads
    if args.no_mesh_occlusion:
        overrides["mesh_occlusion"] = False
    if args.no_prune:
        overrides["pruning"] = False
    if args.backend is not None:
        overrides["backend"] = args.backend
    config, merged = build_config(args.config, overrides)
    if args.iters is not None:
        if args.iters < 0:
            raise UsageError("--iters must be >= 0")
        config = config.with_iters(args.iters)
    dataset = load_dataset(args.dataset)
    mesh_path = args.mesh or dataset.mesh_path
    if mesh_path is None:
        raise UsageError("no mesh given and the dataset names none")
    mesh = load_mesh(mesh_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    effective = dict(merged)
    effective.update({k: getattr(config, k) for k in ("total_iters", "densify_start", "densify_end")})
    (out / "run_config.json").write_text(json.dumps({"dataset": str(args.dataset), "mesh": str(mesh_path),
                                                     "config": effective}, indent=2), encoding="utf-8")
    t0 = time.perf_counter()
    result = train(config, dataset, mesh, out_dir=out, resume=args.resume, depth_cache=out / "depth_cache")
    elapsed = time.perf_counter() - t0
    from .trainer import evaluate
    test = dataset.indices("test")
    ev = evaluate(result.splats, dataset, test, depth_maps(dataset, mesh, out / "depth_cache"), config)
    s = result.splats
    summary = {"iterations": config.total_iters, "psnr": _json_float(ev["psnr"]), "ssim": _json_float(ev["ssim"]),
               "test_views": ev["count"], "n_splats": len(s), "n_tight": int(s.tight.sum()),
               "n_loose": int((~s.tight).sum()), "seconds": elapsed, "backend": config.backend or kernels.BACKEND,
               "threads": config.num_threads}
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_render(args) -> int:
    from .renderer import render
    splats = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.cameras, require_images=False)
    mesh_path = args.mesh or dataset.mesh_path
    occlusion = not args.no_mesh_occlusion
    if occlusion and mesh_path is None:
        raise UsageError("occlusion masking needs a mesh (give --mesh or --no-mesh-occlusion)")
    mesh = load_mesh(mesh_path) if mesh_path is not None else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = []
    for f in dataset.frames:
        depth = depth_maps_single(mesh, f.camera) if occlusion else None
        img = render(splats, f.camera, depth, occlusion=occlusion, backend=args.backend,
                     num_threads=args.threads or 1, update_visibility=False).image
        path = out / f"{f.name}.png"
        write_image(path, img)
        row = {"name": f.name, "path": str(path)}
        if f.image_path.is_file():
            # compare in the stored 8-bit sRGB domain
            ref = quantize(read_image(f.image_path)).astype(np.float64) / 255.0
            row["psnr"] = _json_float(psnr(quantize(img).astype(np.float64) / 255.0, ref))
        report.append(row)
        print(f"{f.name}: " + (f"PSNR {row['psnr']}" if "psnr" in row else "rendered"))
    (out / "render_report.json").write_text(json.dumps({"images": report}, indent=2), encoding="utf-8")
    print(f"{len(report)} image(s) written to {out}")
    return 0


def depth_maps_single(mesh, cam):
    from .mesh import render_depth
    return render_depth(mesh, cam)


def cmd_stats(args) -> int:
    splats = load_checkpoint(args.checkpoint)
    mesh = load_mesh(args.mesh)
    bvh = MeshBvh(mesh)
    if args.classify:
        dist = classify_splats(splats, mesh, bvh, args.d_th)
    else:
        dist = point_to_mesh_distance(mesh, splats.positions, bvh) if len(splats) else np.zeros(0)
    n_tight = int(splats.tight.sum())
    edges = np.concatenate([[0.0], np.geomspace(args.d_th / 100, max(args.d_th * 100, 1e-12), args.bins - 1)]) \
        if args.bins > 1 else np.array([0.0])
    edges = np.append(edges, np.inf)
    counts, _ = np.histogram(dist, bins=edges)
    report = {"total": len(splats), "tight": n_tight, "loose": len(splats) - n_tight, "classified": bool(args.classify),
              "d_th": args.d_th,
              "histogram": [{"lo": float(lo), "hi": _json_float(float(hi)), "count": int(c)}
                            for lo, hi, c in zip(edges[:-1], edges[1:], counts)]}
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(f"total {report['total']}  tight {report['tight']}  loose {report['loose']}")
        print("distance to mesh:")
        for b in report["histogram"]:
            print(f"  [{b['lo']:.3g}, {b['hi'] if isinstance(b['hi'], str) else format(b['hi'], '.3g')}) {b['count']}")
    if args.save:
        save_checkpoint(splats, args.save)
    return 0


def cmd_check_grad(args) -> int:
    from .gradients import PARAM_CLASSES, check_gradients, gradient_fixture
    if args.scene != "fixture":
        raise UsageError(f"unknown scene {args.scene!r}; only 'fixture' is available")
    if args.corrupt is not None and args.corrupt not in PARAM_CLASSES:
        raise UsageError(f"--corrupt must be one of {', '.join(PARAM_CLASSES)}")
    if args.threads is not None:
        log.debug("check-grad renders single-threaded per probe; --threads %d noted", args.threads)
    scene = gradient_fixture(args.splats, args.size, args.seed, args.sh_degree)
    t0 = time.perf_counter()
    report = check_gradients(scene, h=args.h, backend=args.backend, corrupt=args.corrupt)
    print(report.table())
    print(f"elapsed {time.perf_counter() - t0:.1f}s")
    if args.report:
        Path(args.report).write_text(report.to_json(), encoding="utf-8")
    return 0 if report.passed else 1


def cmd_make_scene(args) -> int:
    spec = SceneSpec(kind=args.kind, width=args.size, height=args.size, n_views=args.views, seed=args.seed)
    if args.kind not in SceneSpec.KINDS:
        raise UsageError(f"unknown scene kind {args.kind!r}")
    out = make_synthetic_scene(spec, args.out)
    print(f"wrote {args.kind} scene to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshsplat", description="Mesh-bound Gaussian splatting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="cap on worker threads")
        sp.add_argument("--backend", choices=sorted(kernels.BACKENDS), default=None, help="raster kernel backend")

    t = sub.add_parser("train", help="optimize splats against a dataset")
    t.add_argument("dataset")
    t.add_argument("--mesh", default=None, help="mesh file (default: the dataset's mesh)")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON config; nested objects or dotted keys")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--resume", default=None, help="checkpoint to start from")
    t.add_argument("--no-mesh-occlusion", action="store_true")
    t.add_argument("--no-prune", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render a checkpoint from a set of cameras")
    r.add_argument("checkpoint")
    r.add_argument("--cameras", required=True, help="dataset directory or transforms JSON")
    r.add_argument("--mesh", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--no-mesh-occlusion", action="store_true")
    common(r)
    r.set_defaults(func=cmd_render)

    s = sub.add_parser("stats", help="tight/loose counts and distance histogram")
    s.add_argument("checkpoint")
    s.add_argument("--mesh", required=True)
    s.add_argument("--classify", action="store_true", help="rebind and reclassify before counting")
    s.add_argument("--d-th", type=float, default=LossWeights().d_th)
    s.add_argument("--bins", type=int, default=8)
    s.add_argument("--json", action="store_true")
    s.add_argument("--save", default=None, help="write the (re)classified checkpoint")
    s.set_defaults(func=cmd_stats)

    g = sub.add_parser("check-grad", help="finite-difference gradient check")
    g.add_argument("--scene", default="fixture")
    g.add_argument("--splats", type=int, default=50)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sh-degree", type=int, default=3)
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--corrupt", default=None, metavar="PARAM", help="deliberately perturb one analytic gradient")
    g.add_argument("--report", default=None, help="write the JSON report here")
    common(g)
    g.set_defaults(func=cmd_check_grad)

    m = sub.add_parser("make-scene", help="write a synthetic dataset")
    m.add_argument("kind", choices=SceneSpec.KINDS)
    m.add_argument("out")
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--views", type=int, default=16)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_scene)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"meshsplat: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, MeshError, PlyError, OSError) as exc:
        print(f"meshsplat: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report module errors as a failed run
        log.debug("failure", exc_info=True)
        print(f"meshsplat: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
