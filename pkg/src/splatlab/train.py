"""Training loop: render, loss, backward, Adam, densify, refine.

One camera per iteration (seeded epoch shuffle without replacement), analytic
backward through the rasterizer, per-group Adam with an exponentially decayed
position learning rate. Densification runs on a fixed cadence inside its
window; the selective refinement step piggybacks on every r-th round using
the same averaged gradient statistic, with gradient accumulators reset when
the block completes. Every iteration appends one log row.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .cameras import SamplingProfile
from .densify import average_gradients, densify_and_prune
from .gaussians import GaussianCloud
from .lfcf import LFCFConfig, LFCFState, TrainPhase, lfcf_step
from .losses import image_loss
from .optim import AdamOptimizer
from .rasterizer import render_backward, render_forward
from .sceneio import SceneBundle, build_initial_cloud, inject_noise


@dataclass
class TrainConfig:
    iterations: int = 7000
    densify_from: int = 500
    densify_until: Optional[int] = None  # defaults to 0.6 * iterations
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    densify_size_fraction: float = 0.01  # of scene extent
    opacity_prune: float = 0.005
    ssim_weight: float = 0.2
    seed: int = 0
    lr_position: float = 1.6e-4  # scaled by scene extent, decayed
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    max_gaussians: int = 200_000
    sh_degree: int = 0
    lowpass_baseline: bool = False
    lowpass_kappa: float = 0.2
    lfcf_enabled: bool = False
    lfcf: LFCFConfig = field(default_factory=LFCFConfig)
    init_noise_target: str = ""  # '', 'coordinates' or 'scales'
    init_noise_k: float = 0.0
    init_noise_seed: int = 0

    def __post_init__(self):
        if self.densify_until is None:
            self.densify_until = int(round(0.6 * self.iterations))
        if self.iterations > 0 and not (self.densify_from < self.densify_until <= self.iterations):
            raise ValueError("need densify_from < densify_until <= iterations")
        if not (0.0 <= self.ssim_weight <= 1.0):
            raise ValueError("ssim_weight must lie in [0, 1]")
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")
        if self.init_noise_target not in ("", "coordinates", "scales"):
            raise ValueError(f"unknown init_noise_target {self.init_noise_target!r}")


@dataclass
class IterationLog:
    iteration: int
    loss: float
    gaussian_count: int
    mean_scale: float
    clone_count: int = 0
    split_count: int = 0
    prune_count: int = 0
    lfcf_expand_count: int = 0
    lfcf_shrinksplit_count: int = 0
    wall_time_ms: float = 0.0


LOG_HEADER = "iteration,loss,count,mean_scale,clones,splits,prunes,lfcf_expand,lfcf_shrinksplit,ms"


def write_logs_csv(logs: List[IterationLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")
        writer = csv.writer(fh)
        for log in logs:
            writer.writerow(
                [
                    log.iteration,
                    repr(log.loss),
                    log.gaussian_count,
                    repr(log.mean_scale),
                    log.clone_count,
                    log.split_count,
                    log.prune_count,
                    log.lfcf_expand_count,
                    log.lfcf_shrinksplit_count,
                    f"{log.wall_time_ms:.3f}",
                ]
            )


def initialize_cloud(scene: SceneBundle, cfg: TrainConfig) -> GaussianCloud:
    """Seed cloud from the scene's init points, with optional noise injection."""
    cloud = build_initial_cloud(scene.init_positions, scene.init_colors, cfg.sh_degree)
    if cfg.init_noise_target and cfg.init_noise_k > 0.0:
        cloud = inject_noise(
            cloud, cfg.init_noise_target, cfg.init_noise_k, cfg.init_noise_seed, extent=scene.extent
        )
    return cloud


def _position_lr(cfg: TrainConfig, extent: float, iteration: int) -> float:
    t = iteration / max(cfg.iterations, 1)
    log_lr = (1.0 - t) * np.log(cfg.lr_position * extent) + t * np.log(cfg.lr_position_final * extent)
    return float(np.exp(log_lr))


def train(scene: SceneBundle, cfg: TrainConfig) -> Tuple[GaussianCloud, List[IterationLog]]:
    """Optimize a cloud against the scene's training views; deterministic per seed."""
    train_cams = [c for c in scene.train_cameras if c.id in scene.images]
    if not train_cams:
        raise ValueError("scene has no training cameras with images")

    cloud = initialize_cloud(scene, cfg)
    logs: List[IterationLog] = []
    if cfg.iterations == 0:
        return cloud, logs

    seq = np.random.SeedSequence(cfg.seed)
    camera_rng, densify_rng, lfcf_rng = [np.random.default_rng(s) for s in seq.spawn(3)]

    param_names = ["positions", "log_scales", "rotations", "opacity_logits", "colors"]
    if cloud.sh1 is not None:
        param_names.append("sh1")
    optimizer = AdamOptimizer({name: getattr(cloud, name).shape for name in param_names})
    lfcf_state = LFCFState.zeros(cloud.count)
    lowpass_rates = None
    if cfg.lowpass_baseline:
        lowpass_rates = SamplingProfile.from_positions(cloud.positions, train_cams).rate

    background = np.asarray(scene.background, dtype=np.float64)
    order = camera_rng.permutation(len(train_cams))
    for iteration in range(1, cfg.iterations + 1):
        t_start = time.perf_counter()
        slot = (iteration - 1) % len(train_cams)
        if slot == 0 and iteration > 1:
            order = camera_rng.permutation(len(train_cams))
        cam = train_cams[order[slot]]
        target = scene.images[cam.id]

        image, ctx = render_forward(
            cloud, cam, background, lowpass_rates=lowpass_rates, lowpass_kappa=cfg.lowpass_kappa
        )
        loss_value, loss_grad = image_loss(image.rgb, target, cfg.ssim_weight)
        grads = render_backward(cloud, cam, background, loss_grad, context=ctx)

        lrs = {
            "positions": _position_lr(cfg, scene.extent, iteration),
            "log_scales": cfg.lr_scale,
            "rotations": cfg.lr_rotation,
            "opacity_logits": cfg.lr_opacity,
            "colors": cfg.lr_color,
            "sh1": cfg.lr_color / 20.0,
        }
        optimizer.step(
            {name: getattr(cloud, name) for name in param_names},
            {name: getattr(grads, name) for name in param_names},
            {name: lrs[name] for name in param_names},
        )

        log = IterationLog(
            iteration=iteration,
            loss=loss_value,
            gaussian_count=cloud.count,
            mean_scale=cloud.mean_scale(),
        )

        in_window = cfg.densify_from <= iteration <= cfg.densify_until
        if in_window and (iteration - cfg.densify_from) % cfg.densify_interval == 0:
            round_index = (iteration - cfg.densify_from) // cfg.densify_interval
            avg = average_gradients(cloud)
            dstats, record = densify_and_prune(
                cloud,
                avg,
                cfg.densify_grad_threshold,
                cfg.opacity_prune,
                scene.extent,
                cfg.densify_size_fraction,
                densify_rng,
                cfg.max_gaussians,
            )
            optimizer.remap_rows(record.keep_mask, record.parents.size)
            lfcf_state.remap(record)
            avg = record.remap(avg, inherit=True)
            log.clone_count = dstats.clones
            log.split_count = dstats.splits
            log.prune_count = dstats.pruned

            if cfg.lfcf_enabled and round_index % cfg.lfcf.effective_cadence == 0:
                profile = SamplingProfile.from_positions(cloud.positions, train_cams)
                phase = TrainPhase(iteration, cfg.densify_from, cfg.densify_until)
                lstats, lrecord = lfcf_step(
                    cloud, avg, lfcf_state, profile, cfg.lfcf, phase, lfcf_rng, cfg.max_gaussians
                )
                optimizer.remap_rows(lrecord.keep_mask, lrecord.parents.size)
                log.lfcf_expand_count = lstats.expanded
                log.lfcf_shrinksplit_count = lstats.shrunk

            cloud.reset_statistics()
            if cfg.lowpass_baseline:
                lowpass_rates = SamplingProfile.from_positions(cloud.positions, train_cams).rate
            cloud.validate()  # NaN guard at every densification interval
            log.gaussian_count = cloud.count
            log.mean_scale = cloud.mean_scale()

        log.wall_time_ms = (time.perf_counter() - t_start) * 1000.0
        logs.append(log)

    cloud.validate()
    return cloud, logs
