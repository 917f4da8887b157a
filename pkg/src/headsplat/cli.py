"""Command-line surface: render, fit, eval, and profile subcommands.

Exit codes: 0 success, 1 usage/config error, 2 runtime or numeric failure.
Set AVATAR_LOG=DEBUG|INFO|WARNING to control log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .cloud import AvatarParams
from .fitting import (FitDivergenceError, FrameObservations, fit_sequence,
                      initialize_for_fit, reconstruct_primitives)
from .images import read_png, write_png
from .losses import l1_loss, psnr, ssim
from .mesh import load_obj
from .rasterizer import profile_render, render_tiled
from .scene import (ConfigError, SceneConfig, load_camera_file,
                    load_reference_landmarks, load_scene_config, load_tracked_vertices)
from .snapshot import load_params, save_params
from .uvgrid import build_uv_sample_table

log = logging.getLogger("headsplat")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _Parser(argparse.ArgumentParser):
    # exit code 1 for usage errors (argparse defaults to 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _parse_background(text: str):
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError("--background expects R,G,B in [0,1]")
    values = tuple(float(p) for p in parts)
    if any(v < 0.0 or v > 1.0 for v in values):
        raise ConfigError("--background components must lie in [0,1]")
    return values


def _load_template(cfg: SceneConfig):
    template = load_obj(cfg.resolve(cfg.template_obj))
    if cfg.landmark_indices:
        template = template.with_landmarks(cfg.landmark_indices)
    return template


def _restore_state(cfg: SceneConfig, snapshot_path):
    """Rebuild (template, table, primitives) from a config plus a snapshot."""
    template = _load_template(cfg)
    params, scale_init_raw, meta = load_params(snapshot_path)
    table = build_uv_sample_table(template, cfg.uv_resolution)
    if meta.get("grid_resolution") not in (None, cfg.uv_resolution):
        raise ConfigError(
            f"snapshot grid resolution {meta.get('grid_resolution')} does not match "
            f"config uv_resolution {cfg.uv_resolution}")
    if params.vertex_offsets.shape[0] != template.vertex_count:
        raise ConfigError(
            f"snapshot array 'vertex_offsets' has {params.vertex_offsets.shape[0]} rows, "
            f"template has {template.vertex_count} vertices")
    n = table.valid_count
    for name, arr in (("delta_pos", params.delta_pos), ("delta_rot", params.delta_rot),
                      ("delta_scale", params.delta_scale), ("opacity_raw", params.opacity_raw),
                      ("color_raw", params.color_raw), ("scale_init_raw", scale_init_raw)):
        if arr.shape[0] != n:
            raise ConfigError(
                f"snapshot array '{name}' holds {arr.shape[0]} gaussians, "
                f"UV table has {n} valid texels")
    _, prims = reconstruct_primitives(template, table, params, scale_init_raw)
    return template, table, prims


def cmd_render(args) -> int:
    cfg = load_scene_config(args.config)
    _, _, prims = _restore_state(cfg, args.snapshot)
    cameras = load_camera_file(args.camera)
    background = _parse_background(args.background) if args.background else None
    channels = 4 if args.alpha else 3
    if isinstance(cameras, list):
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for k, cam in enumerate(cameras):
            img = render_tiled(prims, cam, tile_size=args.tile_size, channels=channels,
                               background=background, threads=args.threads)
            write_png(out_dir / f"view_{k:04d}.png", img)
        log.info("wrote %d views to %s", len(cameras), out_dir)
    else:
        img = render_tiled(prims, cameras, tile_size=args.tile_size, channels=channels,
                           background=background, threads=args.threads)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_png(args.out, img)
        log.info("wrote %s", args.out)
    return EXIT_OK


def _load_frames(cfg: SceneConfig) -> list[FrameObservations]:
    cameras = [load_camera_file(cfg.resolve(p)) for p in cfg.cameras]
    for p, cam in zip(cfg.cameras, cameras):
        if isinstance(cam, list):
            raise ConfigError(f"{p}: fit cameras must be single-camera files")
    frames = []
    for f, frame in enumerate(cfg.frames):
        targets = [read_png(cfg.resolve(p)) for p in frame["targets"]]
        tracked = (load_tracked_vertices(cfg.resolve(cfg.tracked_vertices), f)
                   if cfg.tracked_vertices else None)
        ref_lmk = (load_reference_landmarks(cfg.resolve(cfg.rigid_landmarks), f)
                   if cfg.rigid_landmarks else None)
        frames.append(FrameObservations(cameras=cameras, targets=targets,
                                        tracked_vertices=tracked, reference_landmarks=ref_lmk))
    return frames


def cmd_fit(args) -> int:
    cfg = load_scene_config(args.config)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    template = _load_template(cfg)
    table = build_uv_sample_table(template, cfg.uv_resolution)
    init = initialize_for_fit(template, table)

    fit_cfg = cfg.fit
    if args.seed is not None:
        fit_cfg.seed = args.seed
    if args.threads is not None:
        fit_cfg.threads = args.threads
    if args.tile_size is not None:
        fit_cfg.tile_size = args.tile_size
    if args.background:
        fit_cfg.background = _parse_background(args.background)

    frames = _load_frames(cfg)
    if not frames:
        raise ConfigError(f"{args.config}: no frames to fit")

    def on_snapshot(frame_idx: int, iteration: int, params: AvatarParams):
        save_params(out_dir / f"frame_{frame_idx:04d}_it{iteration:06d}.snap",
                    params, init.raw_scales, cfg.uv_resolution, frame_idx)

    try:
        results = fit_sequence(template, table, init, frames, fit_cfg,
                               snapshot_callback=on_snapshot)
    except FitDivergenceError as exc:
        if exc.params is not None:
            save_params(out_dir / "diverged.snap", exc.params, init.raw_scales,
                        cfg.uv_resolution, -1)
            log.error("fit diverged at iteration %d; diagnostic snapshot written", exc.iteration)
        raise

    with open(out_dir / "losses.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "iteration", "l1", "ssim", "geo", "perc",
                         "temp", "lmk", "reg", "total"])
        for f, result in enumerate(results):
            for it, rep in enumerate(result.history):
                writer.writerow([f, it, f"{rep.l1:.10g}", f"{rep.ssim:.10g}",
                                 f"{rep.geo:.10g}", f"{rep.perc:.10g}", f"{rep.temp:.10g}",
                                 f"{rep.lmk:.10g}", f"{rep.reg:.10g}", f"{rep.total:.10g}"])
    for f, result in enumerate(results):
        save_params(out_dir / f"frame_{f:04d}.snap", result.params, init.raw_scales,
                    cfg.uv_resolution, f)
    log.info("fit %d frame(s); outputs in %s", len(results), out_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    rendered_dir = Path(args.rendered)
    target_dir = Path(args.target)
    rendered_files = sorted(p.name for p in rendered_dir.glob("*.png"))
    target_files = sorted(p.name for p in target_dir.glob("*.png"))
    if not rendered_files and not target_files:
        raise ConfigError("no PNG files found in either directory")
    common = [n for n in rendered_files if n in set(target_files)]
    missing = sorted(set(rendered_files).symmetric_difference(target_files))

    rows = []
    for name in common:
        a = read_png(rendered_dir / name).array
        b = read_png(target_dir / name).array
        rows.append({
            "name": name,
            "psnr": psnr(a, b),
            "ssim": ssim(a, b),
            "l1": l1_loss(a, b) * 255.0,
        })
    report = {
        "images": rows,
        "mean": {
            key: (float(np.mean([r[key] for r in rows])) if rows else float("nan"))
            for key in ("psnr", "ssim", "l1")
        },
        "missing": missing,
    }

    header = f"{'image':<28} {'PSNR(dB)':>9} {'SSIM':>8} {'L1x255':>8}"
    print(header)
    print("-" * len(header))
    for r in rows:
        print(f"{r['name']:<28} {r['psnr']:>9.3f} {r['ssim']:>8.4f} {r['l1']:>8.3f}")
    if rows:
        m = report["mean"]
        print("-" * len(header))
        print(f"{'mean':<28} {m['psnr']:>9.3f} {m['ssim']:>8.4f} {m['l1']:>8.3f}")
    for name in missing:
        print(f"missing pair: {name}", file=sys.stderr)

    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True), encoding="utf-8")
    return EXIT_USAGE if missing else EXIT_OK


def cmd_profile(args) -> int:
    cfg = load_scene_config(args.config)
    _, _, prims = _restore_state(cfg, args.snapshot)
    cam = load_camera_file(args.camera)
    if isinstance(cam, list):
        raise ConfigError("profile expects a single-camera file")
    report = profile_render(prims, cam, repeats=args.repeats, tile_size=args.tile_size,
                            threads=args.threads, include_reference=args.include_reference)
    print(f"{report.gaussian_count} gaussians at {report.width}x{report.height}, "
          f"{report.repeats} repeat(s)")
    print(f"{'stage':<14} {'mean (s)':>12} {'min (s)':>12}")
    print("-" * 40)
    for name, t in report.stages.items():
        print(f"{name:<14} {t.mean_seconds:>12.6f} {t.min_seconds:>12.6f}")
    print("-" * 40)
    print(f"{'total':<14} {report.total.mean_seconds:>12.6f} {report.total.min_seconds:>12.6f}")
    if report.reference is not None:
        print(f"{'reference':<14} {report.reference.mean_seconds:>12.6f} "
              f"{report.reference.min_seconds:>12.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True),
                                  encoding="utf-8")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="headsplat",
                     description="fit, render, evaluate, and profile gaussian head avatars")
    sub = parser.add_subparsers(dest="command", required=True)

    p_render = sub.add_parser("render", help="render a snapshot from a camera (or camera list)")
    p_render.add_argument("--config", required=True)
    p_render.add_argument("--snapshot", required=True)
    p_render.add_argument("--camera", required=True)
    p_render.add_argument("--out", required=True)
    p_render.add_argument("--tile-size", type=int, default=16, dest="tile_size")
    p_render.add_argument("--threads", type=int, default=1)
    p_render.add_argument("--background", default=None, help="R,G,B in [0,1], default black")
    p_render.add_argument("--alpha", action="store_true", help="write RGBA instead of RGB")
    p_render.set_defaults(func=cmd_render)

    p_fit = sub.add_parser("fit", help="fit avatar parameters to the config's target images")
    p_fit.add_argument("--config", required=True)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--threads", type=int, default=None)
    p_fit.add_argument("--tile-size", type=int, default=None, dest="tile_size")
    p_fit.add_argument("--background", default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("eval", help="PSNR/SSIM/L1 between two directories of PNGs")
    p_eval.add_argument("--rendered", required=True)
    p_eval.add_argument("--target", required=True)
    p_eval.add_argument("--out", default=None, help="write a JSON report here")
    p_eval.set_defaults(func=cmd_eval)

    p_prof = sub.add_parser("profile", help="stage timing breakdown of the tiled renderer")
    p_prof.add_argument("--config", required=True)
    p_prof.add_argument("--snapshot", required=True)
    p_prof.add_argument("--camera", required=True)
    p_prof.add_argument("--repeats", type=int, default=3)
    p_prof.add_argument("--tile-size", type=int, default=16, dest="tile_size")
    p_prof.add_argument("--threads", type=int, default=1)
    p_prof.add_argument("--include-reference", action="store_true", dest="include_reference")
    p_prof.add_argument("--out", default=None)
    p_prof.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("AVATAR_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitDivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
