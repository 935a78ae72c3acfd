"""Adam optimizer over named parameter groups.

Moment buffers are keyed by parameter name and stay index-aligned with the
Gaussian cloud: structural edits (prune / append) remap them through
remap_rows, with freshly appended Gaussians starting from zero moments.
"""

from __future__ import annotations

from typing import Dict

import numpy as np

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


def adam_step(param, grad, m, v, step, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One bias-corrected Adam update; returns (param, m, v) as new arrays."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamOptimizer:
    """Keeps per-parameter moment buffers; updates are done in place."""

    def __init__(self, shapes: Dict[str, tuple], beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lrs: Dict[str, float]):
        self.step_count += 1
        for name, param in params.items():
            new_p, new_m, new_v = adam_step(
                param,
                grads[name],
                self.m[name],
                self.v[name],
                self.step_count,
                lrs[name],
                self.beta1,
                self.beta2,
                self.eps,
            )
            param[...] = new_p
            self.m[name] = new_m
            self.v[name] = new_v

    def remap_rows(self, keep_mask: np.ndarray, n_new: int):
        """Drop rows where keep_mask is False and append n_new zero rows."""
        for name in list(self.m.keys()):
            for buffers in (self.m, self.v):
                arr = buffers[name][keep_mask]
                if n_new:
                    pad = np.zeros((n_new,) + arr.shape[1:], dtype=arr.dtype)
                    arr = np.concatenate([arr, pad])
                buffers[name] = arr
