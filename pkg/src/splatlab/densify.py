"""Clone / split / prune densification.

Gaussians whose averaged screen-space positional gradient exceeds the
threshold are duplicated in place (when small relative to the scene) or
replaced by two children sampled from their own density with scales divided
by 1.6 (when large). Low-opacity Gaussians are pruned. Every structural edit
is reported as (keep_mask, parents-of-appended) so that optimizer moments and
any other index-aligned state can follow the population.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import GaussianCloud, rotation_matrices

SPLIT_CHILDREN = 2
SPLIT_SCALE_DIVISOR = 1.6  # 0.8 * number of children


@dataclass
class DensifyStats:
    clones: int = 0
    splits: int = 0
    pruned: int = 0


@dataclass
class MutationRecord:
    """How a structural edit changed the population.

    keep_mask has the pre-edit length; parents holds, for every appended
    Gaussian, the pre-edit index it descends from (appended entries follow
    the kept originals in order).
    """

    keep_mask: np.ndarray
    parents: np.ndarray

    def remap(self, values: np.ndarray, inherit: bool = True) -> np.ndarray:
        """Carry an index-aligned per-Gaussian array across the edit."""
        kept = values[self.keep_mask]
        if self.parents.size == 0:
            return kept
        if inherit:
            appended = values[self.parents]
        else:
            appended = np.zeros((self.parents.size,) + values.shape[1:], dtype=values.dtype)
        return np.concatenate([kept, appended])


def average_gradients(cloud: GaussianCloud) -> np.ndarray:
    """Accumulated positional gradient norm per render, 0 where never seen."""
    denom = np.maximum(cloud.obs_count, 1)
    return np.where(cloud.obs_count > 0, cloud.grad_accum / denom, 0.0)


def sample_split_children(cloud: GaussianCloud, idx: np.ndarray, rng: np.random.Generator):
    """Children sampled from each parent's density, scales divided by 1.6."""
    k = idx.size
    reps = np.repeat(idx, SPLIT_CHILDREN)
    stds = np.exp(cloud.log_scales[reps])
    z = rng.standard_normal((k * SPLIT_CHILDREN, 3))
    rot = rotation_matrices(cloud.rotations[reps])
    offsets = np.einsum("nij,nj->ni", rot, stds * z)
    return {
        "positions": cloud.positions[reps] + offsets,
        "log_scales": cloud.log_scales[reps] - np.log(SPLIT_SCALE_DIVISOR),
        "rotations": cloud.rotations[reps].copy(),
        "opacity_logits": cloud.opacity_logits[reps].copy(),
        "colors": cloud.colors[reps].copy(),
        "sh1": None if cloud.sh1 is None else cloud.sh1[reps].copy(),
        "parents": reps,
    }


def densify_and_prune(
    cloud: GaussianCloud,
    avg_grads: np.ndarray,
    grad_threshold: float,
    opacity_floor: float,
    scene_extent: float,
    size_fraction: float,
    rng: np.random.Generator,
    max_count: int,
):
    """One densification round; returns (DensifyStats, MutationRecord)."""
    n0 = cloud.count
    if avg_grads.shape != (n0,):
        raise ValueError("avg_grads is not aligned with the cloud")
    max_scale = np.max(np.exp(cloud.log_scales), axis=1)
    hot = avg_grads > grad_threshold
    size_limit = size_fraction * scene_extent
    clone_idx = np.flatnonzero(hot & (max_scale <= size_limit))
    split_idx = np.flatnonzero(hot & (max_scale > size_limit))

    # Hard cap: drop planned growth from the end, splits first (net +1 each).
    budget = max_count - n0
    net = clone_idx.size + split_idx.size
    while net > budget and split_idx.size > 0:
        split_idx = split_idx[:-1]
        net -= 1
    if net > budget:
        clone_idx = clone_idx[: max(0, budget - split_idx.size)]

    children = sample_split_children(cloud, split_idx, rng)

    keep_mask = np.ones(n0, dtype=bool)
    keep_mask[split_idx] = False  # split parents are replaced
    prune_mask = cloud.opacities < opacity_floor
    n_pruned = int(np.count_nonzero(prune_mask & keep_mask))
    keep_mask &= ~prune_mask

    new_positions = [cloud.positions[clone_idx], children["positions"]]
    new_log_scales = [cloud.log_scales[clone_idx], children["log_scales"]]
    new_rotations = [cloud.rotations[clone_idx], children["rotations"]]
    new_logits = [cloud.opacity_logits[clone_idx], children["opacity_logits"]]
    new_colors = [cloud.colors[clone_idx], children["colors"]]
    new_sh1 = None
    if cloud.sh1 is not None:
        new_sh1 = np.concatenate([cloud.sh1[clone_idx], children["sh1"]])
    parents = np.concatenate([clone_idx, children["parents"]])

    cloud.keep(keep_mask)
    cloud.append(
        np.concatenate(new_positions),
        np.concatenate(new_log_scales),
        np.concatenate(new_rotations),
        np.concatenate(new_logits),
        np.concatenate(new_colors),
        new_sh1,
    )
    stats = DensifyStats(clones=clone_idx.size, splits=split_idx.size, pruned=n_pruned)
    return stats, MutationRecord(keep_mask=keep_mask, parents=parents)
