"""Command-line entry points.

Every subcommand validates its inputs and exits with a stable code on
failure: 2 for usage/configuration problems, 3 for bad or missing data,
4 for numerical failures. Errors print as a single machine-parsable
line on stderr.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np
import torch

from . import formats
from .configs import DataConfig, PostOptConfig, TrainConfig
from .core import (ConfigError, DataError, DomainError, ExposureContext,
                   ImageBuffer, NumericalError)
from .datagen import generate_scene, load_training_scene, render_dataset
from .evaluate import evaluate_bundle, split_views
from .model import infer
from .optimize import load_model, post_optimize, train_toy
from .render import render_gaussians
from .tonemap import CRF_PRESETS, tonemap_forward

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _scene_manifest(path) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    if (p / "manifest.json").is_file():
        return p / "manifest.json"
    raise DataError(f"{p}: no manifest.json found")


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid expects ROWSxCOLS, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise ConfigError(f"--grid needs positive dimensions, got {text!r}")
    return rows, cols


# ---------------------------------------------------------------- commands


def _cmd_gen_data(args) -> int:
    rows, cols = _parse_grid(args.grid)
    cfg = DataConfig(grid_rows=rows, grid_cols=cols, image_size=args.size,
                     crf=args.crf)
    out = Path(args.out)
    for i in range(args.scenes):
        seed = args.seed + i
        scene = generate_scene(seed, cfg)
        manifest = render_dataset(scene, cfg, out / f"scene_{seed:06d}")
        print(manifest)
    return 0


def _cmd_train(args) -> int:
    cfg = TrainConfig(iters=args.iters, seed=args.seed,
                      geo_iters=args.geo_iters)
    scenes = [load_training_scene(_scene_manifest(d)) for d in args.data]
    result = train_toy(scenes, cfg, Path(args.out))
    print(f"checkpoint {result.checkpoint}")
    if result.losses:
        print(f"loss {result.losses[0]:.6g} -> {result.losses[-1]:.6g}")
    return 0


def _context_stack(scene, split):
    images = scene.ldr[list(split.context_views), list(split.context_exposures)]
    cameras = [scene.cameras[v] for v in split.context_views]
    times = [scene.exposures[e] for e in split.context_exposures]
    return images, cameras, ExposureContext.from_times(times)


def _cmd_infer(args) -> int:
    scene = load_training_scene(_scene_manifest(args.scene))
    split = split_views(scene.manifest, args.seed, n_context=args.views)
    model = load_model(Path(args.ckpt))
    images, cameras, exposures = _context_stack(scene, split)
    bundle, seconds = infer(model, images, exposures, cameras)
    formats.save_bundle(Path(args.out), bundle, extra_meta={
        "scene_id": scene.manifest.scene_id,
        "image_size": list(scene.manifest.image_size),
        "split_seed": args.seed,
        "context_views": list(split.context_views),
        "context_exposures": list(split.context_exposures),
        "reconstruction_seconds": round(seconds, 6),
    })
    print(f"reconstruction {seconds * 1e3:.3f} ms")
    print(f"bundle {args.out}")
    return 0


def _cmd_post_opt(args) -> int:
    cfg = PostOptConfig(iters=args.iters)
    bundle = formats.load_bundle(Path(args.bundle))
    meta = formats.read_bundle_meta(Path(args.bundle))
    scene = load_training_scene(_scene_manifest(args.scene))
    if "context_views" in meta:
        views = list(meta["context_views"])
        exposure_idx = list(meta["context_exposures"])
    else:
        split = split_views(scene.manifest, args.seed, n_context=args.views)
        views = list(split.context_views)
        exposure_idx = list(split.context_exposures)
    images = [scene.ldr[v, e].permute(1, 2, 0).numpy()
              for v, e in zip(views, exposure_idx)]
    cameras = [scene.cameras[v] for v in views]
    times = [scene.exposures[e] for e in exposure_idx]
    refined, history = post_optimize(bundle, images, times, cameras=cameras,
                                     cfg=cfg)
    carry = {k: meta[k] for k in ("scene_id", "image_size", "split_seed",
                                  "context_views", "context_exposures",
                                  "reconstruction_seconds") if k in meta}
    formats.save_bundle(Path(args.out), refined, extra_meta=carry)
    if history:
        print(f"refined {len(history)} iters, "
              f"loss {history[0]:.6g} -> {history[-1]:.6g}")
    print(f"bundle {args.out}")
    return 0


def _cmd_render(args) -> int:
    bundle = formats.load_bundle(Path(args.bundle))
    meta = formats.read_bundle_meta(Path(args.bundle))
    if not 0 <= args.pose_view < len(bundle.cameras):
        raise ConfigError(f"--pose-view {args.pose_view} outside stored "
                          f"cameras 0..{len(bundle.cameras) - 1}")
    if args.exposure <= 0:
        raise ConfigError("--exposure must be positive seconds")
    if args.size is not None:
        size = (args.size, args.size)
    elif "image_size" in meta:
        size = tuple(meta["image_size"])
    else:
        raise ConfigError("bundle stores no image size; pass --size")
    camera = bundle.cameras[args.pose_view]
    with torch.no_grad():
        hdr, _, _, _ = render_gaussians(bundle.gaussians, camera, size,
                                        background=(0.0, 0.0, 0.0))
    hdr = hdr.numpy().astype(np.float32)
    ldr = tonemap_forward(ImageBuffer(hdr, "hdr"), bundle.tonemap,
                          math.log2(args.exposure), bundle.exposures.anchor)
    formats.write_png(Path(args.out), ldr.data)
    print(f"ldr {args.out}")
    if args.hdr_out:
        formats.write_pfm(Path(args.hdr_out), hdr)
        print(f"hdr {args.hdr_out}")
    return 0


def _cmd_eval(args) -> int:
    bundle = formats.load_bundle(Path(args.bundle))
    meta = formats.read_bundle_meta(Path(args.bundle))
    scene = load_training_scene(_scene_manifest(args.scene))
    seed = meta.get("split_seed", args.seed)
    n_context = len(meta.get("context_views", [])) or args.context
    split = split_views(scene.manifest, seed, n_context=n_context)
    report = evaluate_bundle(
        bundle, scene, split,
        reconstruction_seconds=meta.get("reconstruction_seconds"))
    report.save(Path(args.report))
    avg = report.to_dict()["averages"]
    print(f"scene={report.scene_id} psnr={avg['psnr']} ssim={avg['ssim']} "
          f"hdr_psnr={avg['hdr_psnr']}")
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expsplat",
        description="HDR gaussian splatting from multi-exposure LDR captures")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render procedural datasets")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--scenes", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default="5x7")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--crf", default="random",
                   choices=sorted(CRF_PRESETS) + ["random"])
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit the reconstruction networks")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=TrainConfig.iters)
    p.add_argument("--seed", type=int, default=TrainConfig.seed)
    p.add_argument("--geo-iters", type=int, default=TrainConfig.geo_iters)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="single-pass scene reconstruction")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=18)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("post-opt", help="per-scene refinement of a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=PostOptConfig.iters)
    p.add_argument("--views", type=int, default=18)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_post_opt)

    p = sub.add_parser("render", help="re-render a stored view at an exposure")
    p.add_argument("--bundle", required=True)
    p.add_argument("--pose-view", type=int, required=True)
    p.add_argument("--exposure", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hdr-out", default=None)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="held-out metrics for a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--context", type=int, default=18)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as e:
        print(f"expsplat {args.command}: error: {type(e).__name__}: {e}",
              file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"expsplat {args.command}: error: DataError: {e}",
              file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"expsplat {args.command}: error: NumericalError: {e}",
              file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
