"""Pinhole cameras, visibility and per-Gaussian sampling-rate analysis.

Each camera sees a Gaussian at some depth d with focal length f; the highest
pixel frequency it can impose on that Gaussian is proportional to f/d. The
maximal such ratio over all cameras that actually see the point is the
Gaussian's sampling rate, its inverse is the sampling interval, and Gaussians
whose largest scale exceeds the interval are the ones training can resolve
(over-optimized); the rest are under-optimized. Normalized sampling rates
also provide the [0,1] interpolation factors used by the depth-dependent
refinement strategies.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .gaussians import Gaussian

# Fraction of width/height by which the visibility rectangle is expanded:
# slightly off-frame Gaussians still receive gradient through their extent.
DEFAULT_GUARD_BAND = 0.2


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, world-to-camera rigid pose."""

    id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    near: float = 0.01
    far: float = 100.0
    image_path: Optional[str] = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (0.0 < self.near < self.far):
            raise ValueError(f"camera {self.id}: need 0 < near < far")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError(f"camera {self.id}: focal lengths must be positive")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"camera {self.id}: rotation not orthonormal (err={err:.2e})")

    @property
    def focal(self) -> float:
        """Single focal length used for sampling rates (the stricter axis)."""
        return max(self.fx, self.fy)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def project_point(cam: Camera, p: np.ndarray):
    """Project a world point; returns (u, v, depth). depth <= 0 means behind."""
    x, y, z = cam.to_camera(np.asarray(p, dtype=np.float64).reshape(3))
    if z <= 0.0:
        return np.nan, np.nan, float(z)
    return float(cam.fx * x / z + cam.cx), float(cam.fy * y / z + cam.cy), float(z)


def is_visible(cam: Camera, p: np.ndarray, guard_band: float = DEFAULT_GUARD_BAND) -> bool:
    """Visibility indicator: in the depth range and inside the guard-banded frame."""
    u, v, d = project_point(cam, p)
    if not (cam.near <= d <= cam.far):
        return False
    gu, gv = guard_band * cam.width, guard_band * cam.height
    return (-gu <= u <= cam.width + gu) and (-gv <= v <= cam.height + gv)


def sampling_rate(p: np.ndarray, cams: Sequence[Camera], guard_band: float = DEFAULT_GUARD_BAND) -> float:
    """Maximal focal-over-depth ratio over the cameras that see p (0 if none)."""
    if len(cams) == 0:
        raise ValueError("sampling_rate requires at least one camera")
    best = 0.0
    for cam in cams:
        if is_visible(cam, p, guard_band):
            d = float(cam.to_camera(np.asarray(p, dtype=np.float64).reshape(3))[2])
            best = max(best, cam.focal / d)
    return best


def sampling_rates(positions: np.ndarray, cams: Sequence[Camera], guard_band: float = DEFAULT_GUARD_BAND) -> np.ndarray:
    """Vectorized sampling_rate over an (N, 3) position array."""
    if len(cams) == 0:
        raise ValueError("sampling_rates requires at least one camera")
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    best = np.zeros(pts.shape[0], dtype=np.float64)
    for cam in cams:
        xyz = cam.to_camera(pts)
        z = xyz[:, 2]
        ok = z > 0
        u = np.full(pts.shape[0], np.nan)
        v = np.full(pts.shape[0], np.nan)
        u[ok] = cam.fx * xyz[ok, 0] / z[ok] + cam.cx
        v[ok] = cam.fy * xyz[ok, 1] / z[ok] + cam.cy
        gu, gv = guard_band * cam.width, guard_band * cam.height
        vis = (
            (z >= cam.near)
            & (z <= cam.far)
            & (u >= -gu)
            & (u <= cam.width + gu)
            & (v >= -gv)
            & (v <= cam.height + gv)
        )
        rate = np.where(vis, cam.focal / np.where(ok, z, 1.0), 0.0)
        best = np.maximum(best, rate)
    return best


def sampling_interval(nu: float) -> float:
    """Inverse of the sampling rate; inf for unobserved (nu <= 0) Gaussians."""
    if nu <= 0.0:
        return np.inf
    return 1.0 / nu


class OptimizationClass(enum.Enum):
    OVER_OPTIMIZED = "over"
    UNDER_OPTIMIZED = "under"


def classify(g: Gaussian, interval: float) -> OptimizationClass:
    """Over-optimized iff the largest axis scale strictly exceeds the interval."""
    if np.max(g.scale) > interval:
        return OptimizationClass.OVER_OPTIMIZED
    return OptimizationClass.UNDER_OPTIMIZED


def theta_factors(rates: np.ndarray) -> np.ndarray:
    """Min-max normalize sampling rates into [0,1] interpolation factors.

    Deeper (lower-rate) Gaussians get smaller theta. A degenerate population
    where all rates coincide maps to 0.5 everywhere. Unobserved Gaussians
    (rate 0) participate in the min-max range.
    """
    r = np.asarray(rates, dtype=np.float64)
    if r.size == 0:
        return np.zeros(0, dtype=np.float64)
    lo, hi = float(r.min()), float(r.max())
    if hi == lo:
        return np.full(r.shape, 0.5, dtype=np.float64)
    return (r - lo) / (hi - lo)


@dataclass
class SamplingProfile:
    """Per-Gaussian sampling rates, intervals and theta factors."""

    rate: np.ndarray  # (N,) pixels per world unit, 0 for unobserved
    interval: np.ndarray  # (N,) stored as exactly 1/rate (inf for unobserved)
    theta: np.ndarray  # (N,) in [0, 1]

    @classmethod
    def from_positions(cls, positions: np.ndarray, cams: Sequence[Camera]) -> "SamplingProfile":
        rate = sampling_rates(positions, cams)
        with np.errstate(divide="ignore"):
            interval = np.where(rate > 0.0, 1.0 / np.where(rate > 0.0, rate, 1.0), np.inf)
        return cls(rate=rate, interval=interval, theta=theta_factors(rate))


def load_cameras(path) -> List[Camera]:
    """Read a camera set from a JSON array file."""
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    cams = []
    for e in entries:
        cams.append(
            Camera(
                id=str(e["id"]),
                width=int(e["width"]),
                height=int(e["height"]),
                fx=float(e["fx"]),
                fy=float(e["fy"]),
                cx=float(e["cx"]),
                cy=float(e["cy"]),
                rotation=np.array(e["rotation"], dtype=np.float64).reshape(3, 3),
                translation=np.array(e["translation"], dtype=np.float64),
                near=float(e["near"]),
                far=float(e["far"]),
                image_path=e.get("image_path"),
            )
        )
    return cams


def save_cameras(cams: Sequence[Camera], path) -> None:
    entries = []
    for cam in cams:
        entry = {
            "id": cam.id,
            "width": cam.width,
            "height": cam.height,
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "rotation": [float(v) for v in cam.rotation.reshape(9)],
            "translation": [float(v) for v in cam.translation],
            "near": cam.near,
            "far": cam.far,
        }
        if cam.image_path is not None:
            entry["image_path"] = cam.image_path
        entries.append(entry)
    Path(path).write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 1.0, 0.0)):
    """World-to-camera rotation/translation for a camera at eye looking at target.

    Camera convention: x right, y down, z forward (image v grows with camera y).
    The returned rotation is proper (det = +1).
    """
    eye = np.asarray(eye, dtype=np.float64).reshape(3)
    target = np.asarray(target, dtype=np.float64).reshape(3)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    down = -np.asarray(up, dtype=np.float64).reshape(3)
    down = down - (down @ fwd) * fwd
    nd = np.linalg.norm(down)
    if nd < 1e-12:  # forward parallel to up; pick any perpendicular
        alt = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        down = alt - (alt @ fwd) * fwd
        nd = np.linalg.norm(down)
    down /= nd
    right = np.cross(down, fwd)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    return R, t
