"""Training loss: weighted L1 + structural dissimilarity, with gradient."""

from __future__ import annotations

import numpy as np

from .metrics import ssim_with_gradient


def image_loss(rendered: np.ndarray, target: np.ndarray, ssim_weight: float = 0.2):
    """L = (1 - w) * L1 + w * (1 - SSIM); returns (value, d L / d rendered).

    With w = 0 the SSIM term is skipped entirely, which also lifts the
    minimum-size requirement of the windowed SSIM.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"rendered shape {rendered.shape} != target shape {target.shape}")
    if not 0.0 <= ssim_weight <= 1.0:
        raise ValueError(f"ssim_weight must be in [0, 1], got {ssim_weight}")

    diff = rendered - target
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    value = (1.0 - ssim_weight) * l1
    if ssim_weight > 0.0:
        s, ds = ssim_with_gradient(rendered, target)
        value += ssim_weight * (1.0 - s)
        grad = grad - ssim_weight * ds
    return value, grad
