"""Selective frequency-aware refinement of the Gaussian population.

Runs alongside densification: Gaussians whose averaged positional gradient
exceeds a threshold are inspected against their gradient at the previous
invocation. A rising gradient marks an under-optimized Gaussian drifting into
an artifact, so it is expanded to force it to fit low-frequency content
first; a falling gradient marks an over-optimized one, which is shrunk and
(probabilistically) split. Afterwards the per-Gaussian gradient memory is
refreshed for every Gaussian and low-opacity Gaussians are removed.

Refinement factors are shaped by four independent strategies:

* depth: interpolate the factor between c_min and c_max by the normalized
  sampling rate, so poorly sampled (deep) Gaussians are expanded less.
* annealing: decay factors exponentially toward c_end across the
  densification window (coarse first, fine later).
* scale: distribute the factor across axes volume-preservingly, expanding
  the shortest axis and shrinking the longest.
* probabilistic: split only with probability 1 - theta, spending extra
  Gaussians where sampling rates are lowest.

A cadence control runs the whole step only every few densification rounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import SamplingProfile
from .densify import MutationRecord, sample_split_children
from .gaussians import Gaussian, GaussianCloud


@dataclass
class LFCFConfig:
    tau: float = 2e-4  # gradient threshold, same statistic as densification
    epsilon: float = 0.005  # opacity removal threshold
    c_max: float = 1.5
    c_min: float = 1.0
    c_end: float = 1.0
    every_n_rounds: int = 2  # run every r densification rounds
    anneal_exponent: float = 1.0
    depth_strategy: bool = True
    scale_strategy: bool = True
    cadence_strategy: bool = True
    anneal_strategy: bool = True
    probabilistic_strategy: bool = True
    anneal_literal: bool = False  # growing-from-1 variant of the decay curve

    def __post_init__(self):
        if not (self.c_max >= self.c_min >= self.c_end > 0.0):
            raise ValueError("need c_max >= c_min >= c_end > 0")
        if self.tau < 0.0:
            raise ValueError("tau must be non-negative")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.every_n_rounds < 1:
            raise ValueError("every_n_rounds must be >= 1")

    @property
    def effective_cadence(self) -> int:
        return self.every_n_rounds if self.cadence_strategy else 1


@dataclass
class LFCFState:
    """Per-Gaussian gradient memory, index-aligned with the cloud.

    The memory has no meaningful value before the first invocation, so a
    fresh state treats that invocation as a warm-up: it records gradients
    and runs the removal loop but takes no expand/shrink action.
    """

    pgrad: np.ndarray
    primed: bool = True

    @classmethod
    def zeros(cls, count: int) -> "LFCFState":
        return cls(pgrad=np.zeros(count, dtype=np.float64), primed=False)

    def remap(self, record: MutationRecord) -> None:
        self.pgrad = record.remap(self.pgrad, inherit=True)


@dataclass
class LFCFStats:
    expanded: int = 0
    shrunk: int = 0
    split: int = 0
    removed: int = 0


@dataclass
class TrainPhase:
    """Position of the current iteration inside the densification window."""

    iteration: int
    window_start: int
    window_end: int

    @property
    def progress(self) -> float:
        span = self.window_end - self.window_start
        if span <= 0:
            return 1.0
        return (self.iteration - self.window_start) / span


def enlarging_factors(theta: np.ndarray, cfg: LFCFConfig) -> np.ndarray:
    """Linear interpolation c = theta * c_max + (1 - theta) * c_min."""
    theta = np.asarray(theta, dtype=np.float64)
    return theta * cfg.c_max + (1.0 - theta) * cfg.c_min


def anneal_factor(c_i, phase: TrainPhase, cfg: LFCFConfig):
    """Decay the factor from c_i at window start to c_end at window end.

    Outside the densification window the step is inactive and the factor is 1.
    The literal variant instead grows exp(ln(c_i) * x^n) from 1 to c_i.
    """
    x = phase.progress
    if not (0.0 <= x <= 1.0):
        return np.ones_like(np.asarray(c_i, dtype=np.float64))
    c_i = np.asarray(c_i, dtype=np.float64)
    n = cfg.anneal_exponent
    if cfg.anneal_literal:
        return np.exp(np.log(c_i) * x**n)
    return cfg.c_end * np.exp(np.log(c_i / cfg.c_end) * (1.0 - x) ** n)


def split_probability(theta):
    """Probability of splitting a shrunk Gaussian: 1 - theta."""
    return 1.0 - np.asarray(theta, dtype=np.float64)


def axis_factors(scales: np.ndarray, c: np.ndarray, volume_preserving: bool = True) -> np.ndarray:
    """Per-axis factors for each Gaussian given its scalar factor c.

    Volume-preserving: shortest axis gets c, longest 1/c, middle 1 (product
    is exactly 1; axis identity by scale order with index tie-break).
    Otherwise the factor applies isotropically.
    """
    scales = np.asarray(scales, dtype=np.float64)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), scales.shape[:1])
    if not volume_preserving:
        return np.repeat(c[:, None], 3, axis=1)
    order = np.argsort(scales, axis=1, kind="stable")
    out = np.ones_like(scales)
    rows = np.arange(scales.shape[0])
    out[rows, order[:, 0]] = c
    out[rows, order[:, 2]] = 1.0 / c
    return out


def scale_based_factors(g: Gaussian, c: float, enabled: bool = True) -> np.ndarray:
    """Single-Gaussian convenience wrapper around axis_factors."""
    return axis_factors(g.scale[None], np.array([c]), volume_preserving=enabled)[0]


def lfcf_step(
    cloud: GaussianCloud,
    grad: np.ndarray,
    state: LFCFState,
    profile: SamplingProfile,
    cfg: LFCFConfig,
    phase: TrainPhase,
    rng: np.random.Generator,
    max_count: int = 200_000,
):
    """One refinement pass; mutates cloud and state, returns (stats, record)."""
    n0 = cloud.count
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (n0,) or state.pgrad.shape != (n0,) or profile.theta.shape != (n0,):
        raise ValueError("grad, state and sampling profile must be aligned with the cloud")

    if state.primed:
        above = grad > cfg.tau
        rising = grad > state.pgrad
        expand_mask = above & rising
        shrink_mask = above & ~rising
    else:  # warm-up invocation: record gradients only
        state.primed = True
        expand_mask = np.zeros(n0, dtype=bool)
        shrink_mask = np.zeros(n0, dtype=bool)

    if cfg.depth_strategy:
        c_scalar = enlarging_factors(profile.theta, cfg)
    else:
        c_scalar = np.full(n0, cfg.c_max)
    if cfg.anneal_strategy:
        c_scalar = anneal_factor(c_scalar, phase, cfg)
    factors = axis_factors(np.exp(cloud.log_scales), c_scalar, volume_preserving=cfg.scale_strategy)

    log_f = np.log(factors)
    cloud.log_scales[expand_mask] += log_f[expand_mask]
    cloud.log_scales[shrink_mask] -= log_f[shrink_mask]  # reciprocal factor

    shrink_idx = np.flatnonzero(shrink_mask)
    if cfg.probabilistic_strategy and shrink_idx.size:
        eta = split_probability(profile.theta[shrink_idx])
        split_idx = shrink_idx[rng.random(shrink_idx.size) < eta]
    else:
        split_idx = shrink_idx

    budget = max_count - n0
    while split_idx.size > budget:  # each split is net +1
        split_idx = split_idx[:-1]

    children = sample_split_children(cloud, split_idx, rng)
    new_pgrad = grad.copy()  # memory refresh happens for every Gaussian

    # Removal loop: covers originals that survive the branch processing and
    # children (which inherit their parent's opacity).
    keep_mask = np.ones(n0, dtype=bool)
    keep_mask[split_idx] = False
    opacity_prune = cloud.opacities < cfg.epsilon
    n_removed = int(np.count_nonzero(opacity_prune & keep_mask))
    keep_mask &= ~opacity_prune

    child_ok = 1.0 / (1.0 + np.exp(-children["opacity_logits"])) >= cfg.epsilon
    n_removed += int(np.count_nonzero(~child_ok))

    cloud.keep(keep_mask)
    cloud.append(
        children["positions"][child_ok],
        children["log_scales"][child_ok],
        children["rotations"][child_ok],
        children["opacity_logits"][child_ok],
        children["colors"][child_ok],
        None if children["sh1"] is None else children["sh1"][child_ok],
    )
    record = MutationRecord(keep_mask=keep_mask, parents=children["parents"][child_ok])
    state.pgrad = record.remap(new_pgrad, inherit=True)

    stats = LFCFStats(
        expanded=int(np.count_nonzero(expand_mask)),
        shrunk=int(np.count_nonzero(shrink_mask)),
        split=int(split_idx.size),
        removed=n_removed,
    )
    return stats, record
