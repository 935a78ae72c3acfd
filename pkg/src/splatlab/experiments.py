"""Experiment harness: train config variants, evaluate, report.

Each variant is a named TrainConfig trained against a shared scene. The
harness evaluates PSNR/SSIM on training and held-out views, writes one CSV
row per (variant, camera) plus mean and train/test-gap summary rows, renders
the held-out views to PNG, and records timing and config hashes in a JSON
sidecar (kept out of the CSV so reports are byte-reproducible). Variants may
run in parallel worker processes; results merge in submission order.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .cameras import SamplingProfile
from .config import build_train_config, config_hash, config_to_entries
from .metrics import psnr, ssim
from .rasterizer import render
from .sceneio import SceneBundle, load_scene, save_image, save_ply
from .train import TrainConfig, train, write_logs_csv


@dataclass
class Variant:
    name: str
    config: TrainConfig


@dataclass
class EvalReport:
    variant: str
    rows: List[Tuple[str, str, float, float]]  # (camera_id, split, psnr, ssim)
    train_psnr: float
    train_ssim: float
    test_psnr: float
    test_ssim: float
    gap_psnr: float
    gap_ssim: float
    config_hash: str
    seed: int
    wall_time_s: float
    error: Optional[str] = None
    final_count: int = 0
    logs_path: Optional[str] = None


def _metric_mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def evaluate_cloud(cloud, scene: SceneBundle, cfg: TrainConfig):
    """PSNR/SSIM per camera against the stored targets."""
    lowpass_rates = None
    if cfg.lowpass_baseline:
        lowpass_rates = SamplingProfile.from_positions(
            cloud.positions, scene.train_cameras
        ).rate
    rows = []
    renders = {}
    for split, cams in (("train", scene.train_cameras), ("test", scene.test_cameras)):
        for cam in cams:
            image = render(cloud, cam, scene.background, lowpass_rates=lowpass_rates, lowpass_kappa=cfg.lowpass_kappa)
            target = scene.image_for(cam)
            rows.append((cam.id, split, psnr(image.rgb, target), ssim(image.rgb, target)))
            renders[cam.id] = image.rgb
    return rows, renders


def run_variant(scene: SceneBundle, variant: Variant, out_dir) -> EvalReport:
    """Train one variant, evaluate it and write its artifacts."""
    out = Path(out_dir) / variant.name
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    cloud, logs = train(scene, variant.config)
    wall = time.perf_counter() - t0

    logs_path = out / "iterations.csv"
    write_logs_csv(logs, logs_path)
    save_ply(cloud, out / "model.ply")

    rows, renders = evaluate_cloud(cloud, scene, variant.config)
    renders_dir = out / "renders"
    renders_dir.mkdir(exist_ok=True)
    for cam in scene.test_cameras:
        save_image(renders[cam.id], renders_dir / f"{cam.id}.png")

    train_rows = [r for r in rows if r[1] == "train"]
    test_rows = [r for r in rows if r[1] == "test"]
    train_psnr = _metric_mean([r[2] for r in train_rows])
    test_psnr = _metric_mean([r[2] for r in test_rows])
    train_ssim = _metric_mean([r[3] for r in train_rows])
    test_ssim = _metric_mean([r[3] for r in test_rows])
    return EvalReport(
        variant=variant.name,
        rows=rows,
        train_psnr=train_psnr,
        train_ssim=train_ssim,
        test_psnr=test_psnr,
        test_ssim=test_ssim,
        gap_psnr=abs(train_psnr - test_psnr),
        gap_ssim=abs(train_ssim - test_ssim),
        config_hash=config_hash(variant.config),
        seed=variant.config.seed,
        wall_time_s=wall,
        final_count=cloud.count,
        logs_path=str(logs_path),
    )


def _worker(payload):
    scene = load_scene(payload["scene_path"])
    cfg = build_train_config(payload["entries"])
    variant = Variant(name=payload["name"], config=cfg)
    return run_variant(scene, variant, payload["out_dir"])


def _fmt(value: float) -> str:
    if np.isinf(value):
        return "inf"
    if np.isnan(value):
        return "nan"
    return f"{value:.6f}"


def write_eval_csv(reports: List[EvalReport], path) -> None:
    lines = ["variant,camera_id,split,psnr,ssim"]
    for rep in reports:
        if rep.error is not None:
            continue
        for camera_id, split, p, s in rep.rows:
            lines.append(f"{rep.variant},{camera_id},{split},{_fmt(p)},{_fmt(s)}")
        lines.append(f"{rep.variant},(mean),train,{_fmt(rep.train_psnr)},{_fmt(rep.train_ssim)}")
        lines.append(f"{rep.variant},(mean),test,{_fmt(rep.test_psnr)},{_fmt(rep.test_ssim)}")
        lines.append(f"{rep.variant},(gap),both,{_fmt(rep.gap_psnr)},{_fmt(rep.gap_ssim)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(
    name: str,
    scene: Union[SceneBundle, str, Path],
    variants: List[Variant],
    out_dir,
    jobs: int = 1,
) -> List[EvalReport]:
    """Train all variants against one scene and write the report artifacts.

    Per-variant failures are recorded instead of aborting the batch.
    """
    if not variants:
        raise ValueError("run_experiment needs at least one variant")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    scene_path = None
    bundle = None
    if isinstance(scene, SceneBundle):
        bundle = scene
    else:
        scene_path = Path(scene)

    reports: List[EvalReport] = []
    if jobs > 1 and scene_path is not None:
        payloads = [
            {
                "scene_path": str(scene_path),
                "entries": config_to_entries(v.config),
                "name": v.name,
                "out_dir": str(out),
            }
            for v in variants
        ]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_worker, p) for p in payloads]
            for variant, future in zip(variants, futures):
                try:
                    reports.append(future.result())
                except Exception as exc:  # propagate per-variant, keep batch alive
                    reports.append(_error_report(variant, exc))
    else:
        if bundle is None:
            bundle = load_scene(scene_path)
        for variant in variants:
            try:
                reports.append(run_variant(bundle, variant, out))
            except Exception as exc:
                reports.append(_error_report(variant, exc))

    write_eval_csv(reports, out / "eval_report.csv")
    meta = {
        "experiment": name,
        "variants": [
            {
                "name": rep.variant,
                "config_hash": rep.config_hash,
                "seed": rep.seed,
                "wall_time_s": rep.wall_time_s,
                "final_count": rep.final_count,
                "error": rep.error,
            }
            for rep in reports
        ],
    }
    (out / "report.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return reports


def _error_report(variant: Variant, exc: Exception) -> EvalReport:
    return EvalReport(
        variant=variant.name,
        rows=[],
        train_psnr=float("nan"),
        train_ssim=float("nan"),
        test_psnr=float("nan"),
        test_ssim=float("nan"),
        gap_psnr=float("nan"),
        gap_ssim=float("nan"),
        config_hash=config_hash(variant.config),
        seed=variant.config.seed,
        wall_time_s=0.0,
        error=f"{type(exc).__name__}: {exc}",
    )


# ---------------------------------------------------------------------------
# Canonical experiment shapes
# ---------------------------------------------------------------------------


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    entries = config_to_entries(cfg)
    mapped = dict(entries)
    mapped.update(changes)
    return build_train_config(mapped)


def compare_variants(
    baseline: TrainConfig,
    refined: TrainConfig,
    noise_k: float,
    noise_target: str = "scales",
    noise_seed: int = 0,
) -> List[Variant]:
    """The clean/noisy x baseline/refined 2x2 comparison grid."""
    clean = {"init_noise_k": 0.0, "init_noise_target": ""}
    noisy = {"init_noise_k": noise_k, "init_noise_target": noise_target, "init_noise_seed": noise_seed}
    return [
        Variant("clean_baseline", _with(baseline, **clean)),
        Variant("noisy_baseline", _with(baseline, **noisy)),
        Variant("clean_lfcf", _with(refined, **clean)),
        Variant("noisy_lfcf", _with(refined, **noisy)),
    ]


def write_gap_table(reports: List[EvalReport], path) -> None:
    """Gap table over the 2x2 comparison: train/test PSNR per init quality."""
    by_name = {rep.variant: rep for rep in reports}
    lines = ["row,train_psnr,test_psnr"]
    for method, label in (("baseline", "baseline"), ("lfcf", "lfcf")):
        clean = by_name.get(f"clean_{method}")
        noisy = by_name.get(f"noisy_{method}")
        if clean is None or noisy is None or clean.error or noisy.error:
            continue
        lines.append(f"Clean init ({label}),{_fmt(clean.train_psnr)},{_fmt(clean.test_psnr)}")
        lines.append(f"Noisy init ({label}),{_fmt(noisy.train_psnr)},{_fmt(noisy.test_psnr)}")
        lines.append(
            f"/Clean - Noisy/ ({label}),"
            f"{_fmt(abs(clean.train_psnr - noisy.train_psnr))},"
            f"{_fmt(abs(clean.test_psnr - noisy.test_psnr))}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep_variants(base: TrainConfig, c_max_values: Sequence[float], r_values: Sequence[int]) -> List[Variant]:
    """Hyperparameter grid over the expansion bound and the cadence."""
    variants = []
    for c_max in c_max_values:
        for r in r_values:
            cfg = _with(base, lfcf=True, c_max=c_max, r=r)
            variants.append(Variant(f"cmax{c_max:g}_r{r}", cfg))
    return variants
