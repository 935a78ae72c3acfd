"""Command-line surface.

Subcommands: gen-scene, train, render, eval, analyze-sampling, compare,
sweep. Every command is deterministic given --seed and writes all artifacts
under its --out directory. Exit codes: 0 success, 2 usage error, 1 runtime
failure. The SPLATLAB_THREADS environment variable caps worker parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .cameras import SamplingProfile, load_cameras
from .config import CONFIG_KEYS, ConfigError, build_train_config, config_to_entries, load_config, parse_config_text
from .experiments import compare_variants, run_experiment, sweep_variants, write_gap_table
from .metrics import psnr, ssim
from .rasterizer import render
from .sceneio import (
    SceneFormatError,
    SceneSpec,
    generate_synthetic_scene,
    load_ply,
    load_scene,
    save_image,
    save_ply,
    write_scene,
)
from .train import train, write_logs_csv

_SCENE_SPEC_KEYS = {
    "seed": int,
    "object_count": int,
    "layout": str,
    "resolution": int,
    "n_train": int,
    "n_test": int,
    "init_fraction": float,
}


def _cap_jobs(jobs: int) -> int:
    cap = os.environ.get("SPLATLAB_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"SPLATLAB_THREADS must be an integer, got {cap!r}")
    return max(1, jobs)


def _parse_scene_spec(path, seed_override=None) -> SceneSpec:
    entries = {}
    if path is not None:
        entries = parse_config_text(Path(path).read_text(encoding="utf-8"))
    unknown = sorted(set(entries) - set(_SCENE_SPEC_KEYS))
    if unknown:
        raise ConfigError(f"unknown scene spec keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in entries.items():
        expected = _SCENE_SPEC_KEYS[key]
        if expected is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool):
            raise ConfigError(f"scene spec key {key!r}: expected {expected.__name__}, got {value!r}")
        kwargs[key] = value
    if seed_override is not None:
        kwargs["seed"] = seed_override
    try:
        return SceneSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _add_override_flags(parser: argparse.ArgumentParser):
    for key, (_, _, expected) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        if expected is bool:
            parser.add_argument(flag, dest=f"ov_{key}", choices=["on", "off"], default=None)
        else:
            parser.add_argument(flag, dest=f"ov_{key}", type=expected, default=None)


def _collect_overrides(args) -> dict:
    out = {}
    for key in CONFIG_KEYS:
        value = getattr(args, f"ov_{key}", None)
        if value is not None:
            out[key] = value
    return out


def _cmd_gen_scene(args) -> int:
    spec = _parse_scene_spec(args.spec, args.seed)
    bundle, gt = generate_synthetic_scene(spec)
    write_scene(bundle, args.out, gt_cloud=gt)
    print(f"scene written to {args.out} ({gt.count} ground-truth Gaussians, extent {bundle.extent:.3f})")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, _collect_overrides(args))
    scene = load_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cloud, logs = train(scene, cfg)
    save_ply(cloud, out / "model.ply")
    write_logs_csv(logs, out / "iterations.csv")
    print(f"trained {cfg.iterations} iterations, final count {cloud.count}")
    return 0


def _cmd_render(args) -> int:
    cloud = load_ply(args.ply)
    cams = load_cameras(args.cameras)
    background = np.array([float(v) for v in args.background.split(",")])
    if background.size != 3:
        raise ConfigError("--background expects r,g,b")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam in cams:
        image = render(cloud, cam, background)
        save_image(image.rgb, out / f"{cam.id}.png")
    print(f"rendered {len(cams)} views to {out}")
    return 0


def _cmd_eval(args) -> int:
    scene = load_scene(args.scene)
    cloud = load_ply(args.ply)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["camera_id,split,psnr,ssim"]
    summary = {}
    for split, cams in (("train", scene.train_cameras), ("test", scene.test_cameras)):
        values = []
        for cam in cams:
            image = render(cloud, cam, scene.background)
            target = scene.image_for(cam)
            p, s = psnr(image.rgb, target), ssim(image.rgb, target)
            values.append((p, s))
            lines.append(f"{cam.id},{split},{p:.6f},{s:.6f}")
        if values:
            summary[split] = {
                "psnr": float(np.mean([v[0] for v in values])),
                "ssim": float(np.mean([v[1] for v in values])),
            }
    (out / "eval.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def _cmd_analyze_sampling(args) -> int:
    cloud = load_ply(args.ply)
    cams = load_cameras(args.cameras)
    profile = SamplingProfile.from_positions(cloud.positions, cams)
    max_scale = np.max(np.exp(cloud.log_scales), axis=1)
    observed = profile.rate > 0.0
    over = observed & (max_scale > profile.interval)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["index,rate,interval,max_scale,classification"]
    for i in range(cloud.count):
        if not observed[i]:
            label = "unobserved"
        elif over[i]:
            label = "over_optimized"
        else:
            label = "under_optimized"
        interval = profile.interval[i]
        interval_s = "inf" if np.isinf(interval) else f"{interval:.8g}"
        lines.append(f"{i},{profile.rate[i]:.8g},{interval_s},{max_scale[i]:.8g},{label}")
    (out / "sampling.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    n = max(cloud.count, 1)
    summary = {
        "count": cloud.count,
        "fraction_unobserved": float(np.count_nonzero(~observed)) / n,
        "fraction_under_optimized": float(np.count_nonzero(observed & ~over)) / n,
        "fraction_over_optimized": float(np.count_nonzero(over)) / n,
    }
    (out / "sampling_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def _cmd_compare(args) -> int:
    baseline = load_config(args.baseline_config)
    refined = load_config(args.efa_config)
    if args.seed is not None:
        baseline = build_train_config({**config_to_entries(baseline), "seed": args.seed})
        refined = build_train_config({**config_to_entries(refined), "seed": args.seed})
    variants = compare_variants(baseline, refined, args.noise, args.noise_target, args.noise_seed)
    reports = run_experiment("compare", args.scene, variants, args.out, jobs=_cap_jobs(args.jobs))
    write_gap_table(reports, Path(args.out) / "gap_table.csv")
    for rep in reports:
        status = rep.error or f"train {rep.train_psnr:.2f} dB / test {rep.test_psnr:.2f} dB"
        print(f"{rep.variant}: {status}")
    return 0


def _cmd_sweep(args) -> int:
    base = load_config(args.config)
    if args.seed is not None:
        base = build_train_config({**config_to_entries(base), "seed": args.seed})
    c_max_values = [float(v) for v in args.c_max.split(",")]
    r_values = [int(v) for v in args.r.split(",")]
    variants = sweep_variants(base, c_max_values, r_values)
    reports = run_experiment("sweep", args.scene, variants, args.out, jobs=_cap_jobs(args.jobs))
    for rep in reports:
        status = rep.error or f"test {rep.test_psnr:.2f} dB"
        print(f"{rep.variant}: {status}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splatlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    p.add_argument("--spec", default=None, help="scene spec file (key = value)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_scene)

    p = sub.add_parser("train", help="train a model on a scene")
    p.add_argument("--scene", required=True, help="scene directory or manifest path")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    _add_override_flags(p)  # every config key, --seed included
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("render", help="render a PLY from a camera set")
    p.add_argument("--ply", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--background", default="0,0,0")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="evaluate a PLY against scene targets")
    p.add_argument("--scene", required=True)
    p.add_argument("--ply", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze-sampling", help="per-Gaussian sampling rates and classes")
    p.add_argument("--ply", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_analyze_sampling)

    p = sub.add_parser("compare", help="clean/noisy x baseline/refined comparison")
    p.add_argument("--scene", required=True)
    p.add_argument("--baseline-config", required=True)
    p.add_argument("--efa-config", required=True)
    p.add_argument("--noise", type=float, required=True)
    p.add_argument("--noise-target", default="scales", choices=["scales", "coordinates"])
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("sweep", help="hyperparameter grid over c_max and r")
    p.add_argument("--scene", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--c-max", default="1.5,1.75,2.0")
    p.add_argument("--r", default="1,2,5")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
