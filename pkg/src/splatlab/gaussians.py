"""Gaussian primitives and the cloud container.

A scene is a set of anisotropic 3D Gaussians, each parameterized by a center,
per-axis log scales, a rotation quaternion (wxyz), an opacity logit and color
coefficients. Scales live in log space and opacity behind a sigmoid so that
unconstrained gradient steps keep them valid. The covariance of a Gaussian is
Sigma = R S S^T R^T with S = diag(exp(log_scale)) and R the rotation of the
normalized quaternion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

# DC / degree-1 spherical harmonic basis constants.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    return np.log(y / (1.0 - y))


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; raises ValueError on a zero-norm row."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("quaternion with zero or non-finite norm")
    return q / norms


def rotation_matrices(q: np.ndarray) -> np.ndarray:
    """Convert (..., 4) wxyz quaternions to (..., 3, 3) rotation matrices."""
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariances(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Vectorized Sigma = R S S^T R^T for (N,3) log scales and (N,4) quaternions."""
    R = rotation_matrices(rotations)
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    M = R * s[..., None, :]  # R @ diag(s)
    return M @ np.swapaxes(M, -1, -2)


@dataclass
class Gaussian:
    """A single anisotropic 3D Gaussian primitive."""

    position: np.ndarray  # (3,) world units
    log_scale: np.ndarray  # (3,) log of per-axis stddev
    rotation: np.ndarray  # (4,) wxyz quaternion
    opacity_logit: float
    color: np.ndarray  # (3,) base color coefficients (DC term)
    sh1: Optional[np.ndarray] = None  # (9,) degree-1 coefficients, channel-major

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.sh1 is not None:
            self.sh1 = np.asarray(self.sh1, dtype=np.float64).reshape(9)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def build_covariance(g: Gaussian) -> np.ndarray:
    """Covariance Sigma = R S S^T R^T of a single Gaussian (3x3, SPD)."""
    return build_covariances(g.log_scale[None], g.rotation[None])[0]


def evaluate_density(g: Gaussian, x: np.ndarray) -> float:
    """Normalized Gaussian density at a world point x."""
    cov = build_covariance(g)
    d = np.asarray(x, dtype=np.float64).reshape(3) - g.position
    det = np.linalg.det(cov)
    m = d @ np.linalg.solve(cov, d)
    return float((2.0 * np.pi) ** -1.5 * det**-0.5 * np.exp(-0.5 * m))


def frequency_weight(cov: np.ndarray, omega: np.ndarray) -> float:
    """Magnitude of the Gaussian's spectrum at angular frequency omega.

    Equals exp(-omega^T Sigma omega / 2): 1 at omega=0 and strictly
    decreasing along any ray away from the origin, so larger covariances
    mean narrower bandwidth (relatively more low-frequency content).
    """
    w = np.asarray(omega, dtype=np.float64).reshape(3)
    return float(np.exp(-0.5 * w @ np.asarray(cov, dtype=np.float64) @ w))


def apply_scale_factor(g: Gaussian, c) -> Gaussian:
    """Return a copy of g with per-axis scales multiplied by c (all c > 0)."""
    c = np.asarray(c, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(c)) or np.any(c <= 0.0):
        raise ValueError(f"scale factors must be positive and finite, got {c}")
    return Gaussian(
        position=g.position.copy(),
        log_scale=g.log_scale + np.log(c),
        rotation=g.rotation.copy(),
        opacity_logit=g.opacity_logit,
        color=g.color.copy(),
        sh1=None if g.sh1 is None else g.sh1.copy(),
    )


@dataclass
class GaussianCloud:
    """Array-of-Gaussians with index-aligned gradient/observation statistics.

    All parameter arrays share the leading dimension ``count``. The two
    auxiliary arrays accumulate screen-space positional gradient norms and
    the number of renders in which each Gaussian was rasterized; they feed
    the densification and selective-refinement criteria and are kept aligned
    through every structural mutation.
    """

    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) wxyz
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) DC color coefficients
    sh1: Optional[np.ndarray] = None  # (N, 9) degree-1 coefficients or None
    grad_accum: np.ndarray = field(default=None)  # (N,)
    obs_count: np.ndarray = field(default=None)  # (N,)

    def __post_init__(self):
        n = self.positions.shape[0]
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        if self.sh1 is not None:
            self.sh1 = np.ascontiguousarray(self.sh1, dtype=np.float64).reshape(n, 9)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n, dtype=np.float64)
        if self.obs_count is None:
            self.obs_count = np.zeros(n, dtype=np.int64)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return build_covariances(self.log_scales, self.rotations)

    def gaussian(self, i: int) -> Gaussian:
        """Copy of the i-th primitive as a standalone Gaussian."""
        return Gaussian(
            position=self.positions[i].copy(),
            log_scale=self.log_scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i].copy(),
            sh1=None if self.sh1 is None else self.sh1[i].copy(),
        )

    @classmethod
    def empty(cls, with_sh1: bool = False) -> "GaussianCloud":
        return cls(
            positions=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            colors=np.zeros((0, 3)),
            sh1=np.zeros((0, 9)) if with_sh1 else None,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            colors=self.colors.copy(),
            sh1=None if self.sh1 is None else self.sh1.copy(),
            grad_accum=self.grad_accum.copy(),
            obs_count=self.obs_count.copy(),
        )

    def keep(self, mask: np.ndarray) -> None:
        """Remove all Gaussians where mask is False, aux arrays included."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.log_scales = self.log_scales[mask]
        self.rotations = self.rotations[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.colors = self.colors[mask]
        if self.sh1 is not None:
            self.sh1 = self.sh1[mask]
        self.grad_accum = self.grad_accum[mask]
        self.obs_count = self.obs_count[mask]

    def append(
        self,
        positions: np.ndarray,
        log_scales: np.ndarray,
        rotations: np.ndarray,
        opacity_logits: np.ndarray,
        colors: np.ndarray,
        sh1: Optional[np.ndarray] = None,
    ) -> None:
        """Append new Gaussians; their statistics start at zero."""
        k = positions.shape[0]
        self.positions = np.concatenate([self.positions, positions.reshape(k, 3)])
        self.log_scales = np.concatenate([self.log_scales, log_scales.reshape(k, 3)])
        self.rotations = np.concatenate([self.rotations, rotations.reshape(k, 4)])
        self.opacity_logits = np.concatenate([self.opacity_logits, np.reshape(opacity_logits, k)])
        self.colors = np.concatenate([self.colors, colors.reshape(k, 3)])
        if self.sh1 is not None:
            add = np.zeros((k, 9)) if sh1 is None else sh1.reshape(k, 9)
            self.sh1 = np.concatenate([self.sh1, add])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros(k)])
        self.obs_count = np.concatenate([self.obs_count, np.zeros(k, dtype=np.int64)])

    def reset_statistics(self) -> None:
        self.grad_accum = np.zeros(self.count, dtype=np.float64)
        self.obs_count = np.zeros(self.count, dtype=np.int64)

    def validate(self) -> None:
        """Check array alignment and finiteness; raises on violation."""
        n = self.count
        shapes = {
            "log_scales": (self.log_scales, (n, 3)),
            "rotations": (self.rotations, (n, 4)),
            "opacity_logits": (self.opacity_logits, (n,)),
            "colors": (self.colors, (n, 3)),
            "grad_accum": (self.grad_accum, (n,)),
            "obs_count": (self.obs_count, (n,)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
        if self.sh1 is not None and self.sh1.shape != (n, 9):
            raise ValueError(f"sh1 has shape {self.sh1.shape}, expected {(n, 9)}")
        for name, arr in [
            ("positions", self.positions),
            ("log_scales", self.log_scales),
            ("rotations", self.rotations),
            ("opacity_logits", self.opacity_logits),
            ("colors", self.colors),
        ]:
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")

    def mean_scale(self) -> float:
        """Average over Gaussians of the mean per-axis scale (0.0 if empty)."""
        if self.count == 0:
            return 0.0
        return float(np.mean(np.exp(self.log_scales)))
