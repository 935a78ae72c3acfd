"""Scene persistence and fabrication.

Covers the on-disk surface of a scene: binary PLY point clouds in the
ecosystem's Gaussian attribute layout, camera JSON, target images as 8-bit
PNG (metrics run on their float conversions), and a manifest tying them
together. Also fabricates synthetic ground-truth scenes (colored Gaussian
blobs at mixed depths rendered to target images), and implements the
initialization perturbations used by the experiments: Gaussian noise on
coordinates or log scales, and low-quality dense resampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .cameras import Camera, load_cameras, look_at, save_cameras
from .gaussians import SH_C0, GaussianCloud, inverse_sigmoid
from .rasterizer import render

# Unit noise magnitudes: one unit of coordinate noise is 1% of the scene
# extent; one unit of scale noise multiplies scales by about sqrt(2).
COORD_NOISE_FRACTION = 0.01
SCALE_NOISE_SIGMA = np.log(2.0) / 2.0
RESAMPLE_JITTER_FRACTION = 0.005

INIT_OPACITY = 0.1
INIT_SCALE_NEIGHBORS = 3


class SceneFormatError(ValueError):
    """Raised for malformed scene files (PLY, manifest, cameras)."""


@dataclass
class SceneBundle:
    """Ground-truth images, cameras and the initialization point set."""

    train_cameras: List[Camera]
    test_cameras: List[Camera]
    images: Dict[str, np.ndarray]  # camera id -> (H, W, 3) float in [0, 1]
    init_positions: np.ndarray  # (P, 3)
    init_colors: np.ndarray  # (P, 3) RGB in [0, 1]
    extent: float
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if len(self.train_cameras) < 1:
            raise ValueError("scene needs at least one training camera")
        if self.extent <= 0.0:
            raise ValueError("scene extent must be positive")
        train_ids = {c.id for c in self.train_cameras}
        test_ids = {c.id for c in self.test_cameras}
        if train_ids & test_ids:
            raise ValueError(f"train/test camera ids overlap: {sorted(train_ids & test_ids)}")

    def image_for(self, cam: Camera) -> np.ndarray:
        return self.images[cam.id]


# ---------------------------------------------------------------------------
# PLY: binary little-endian, reference Gaussian attribute layout.
# ---------------------------------------------------------------------------

_PLY_BASE = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
_PLY_REST = [f"f_rest_{i}" for i in range(9)]
_PLY_TAIL = ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _ply_property_names(with_sh1: bool) -> List[str]:
    return _PLY_BASE + (_PLY_REST if with_sh1 else []) + _PLY_TAIL


def save_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud as binary little-endian PLY with float32 attributes."""
    names = _ply_property_names(cloud.sh1 is not None)
    n = cloud.count
    data = np.zeros(n, dtype=[(name, "<f4") for name in names])
    data["x"], data["y"], data["z"] = cloud.positions.astype(np.float32).T
    data["f_dc_0"], data["f_dc_1"], data["f_dc_2"] = cloud.colors.astype(np.float32).T
    if cloud.sh1 is not None:
        rest = cloud.sh1.astype(np.float32)
        for i in range(9):
            data[f"f_rest_{i}"] = rest[:, i]
    data["opacity"] = cloud.opacity_logits.astype(np.float32)
    data["scale_0"], data["scale_1"], data["scale_2"] = cloud.log_scales.astype(np.float32).T
    data["rot_0"], data["rot_1"], data["rot_2"], data["rot_3"] = cloud.rotations.astype(np.float32).T

    header_lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header_lines += [f"property float {name}" for name in names]
    header_lines.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header_lines) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def load_ply(path) -> GaussianCloud:
    """Read a Gaussian PLY; raises SceneFormatError naming any missing property."""
    raw = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = raw.find(marker)
    if not raw.startswith(b"ply") or pos < 0:
        raise SceneFormatError(f"{path}: not a PLY file")
    header = raw[:pos].decode("ascii", errors="replace").splitlines()
    body = raw[pos + len(marker):]

    count = None
    props: List[str] = []
    fmt_ok = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["format", "binary_little_endian"]:
            fmt_ok = True
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"]:
            if parts[1] != "float":
                raise SceneFormatError(f"{path}: unsupported property type {parts[1]}")
            props.append(parts[2])
    if not fmt_ok:
        raise SceneFormatError(f"{path}: expected binary little-endian format")
    if count is None:
        raise SceneFormatError(f"{path}: missing vertex element")

    with_sh1 = "f_rest_0" in props
    for name in _ply_property_names(with_sh1):
        if name not in props:
            raise SceneFormatError(f"{path}: missing required property {name!r}")

    dtype = np.dtype([(name, "<f4") for name in props])
    expected = count * dtype.itemsize
    if len(body) < expected:
        raise SceneFormatError(f"{path}: truncated body ({len(body)} < {expected} bytes)")
    data = np.frombuffer(body[:expected], dtype=dtype)

    sh1 = None
    if with_sh1:
        sh1 = np.stack([data[f"f_rest_{i}"] for i in range(9)], axis=1).astype(np.float64)
    return GaussianCloud(
        positions=np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64),
        log_scales=np.stack([data["scale_0"], data["scale_1"], data["scale_2"]], axis=1).astype(np.float64),
        rotations=np.stack([data["rot_0"], data["rot_1"], data["rot_2"], data["rot_3"]], axis=1).astype(np.float64),
        opacity_logits=data["opacity"].astype(np.float64),
        colors=np.stack([data["f_dc_0"], data["f_dc_1"], data["f_dc_2"]], axis=1).astype(np.float64),
        sh1=sh1,
    )


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def save_image(rgb: np.ndarray, path) -> None:
    """Quantize a float [0,1] image to 8-bit PNG."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)
    return u8.astype(np.float64) / 255.0


def quantize_image(rgb: np.ndarray) -> np.ndarray:
    """The exact float image a save/load PNG round trip produces."""
    u8 = np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    return u8.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def build_initial_cloud(positions: np.ndarray, colors_rgb: np.ndarray, sh_degree: int = 0) -> GaussianCloud:
    """Seed a trainable cloud from (position, color) points.

    Isotropic scales from the mean squared distance to the nearest neighbors,
    identity rotations, uniform starting opacity.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    colors_rgb = np.asarray(colors_rgb, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    if n == 0:
        raise ValueError("initialization point set is empty")
    if n > 1:
        tree = cKDTree(positions)
        k = min(INIT_SCALE_NEIGHBORS + 1, n)
        dists, _ = tree.query(positions, k=k)
        mean_sq = np.mean(dists[:, 1:] ** 2, axis=1)
    else:
        mean_sq = np.full(1, 1e-4)
    mean_sq = np.maximum(mean_sq, 1e-7)
    log_scales = np.repeat(0.5 * np.log(mean_sq)[:, None], 3, axis=1)

    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    return GaussianCloud(
        positions=positions.copy(),
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=np.full(n, inverse_sigmoid(INIT_OPACITY)),
        colors=(colors_rgb - 0.5) / SH_C0,
        sh1=np.zeros((n, 9)) if sh_degree >= 1 else None,
    )


def inject_noise(obj, target: str, k: float, seed: int, extent: Optional[float] = None):
    """Perturb an initialization with intensity k of unit Gaussian noise.

    target 'coordinates' shifts positions by k * (1% extent) per component;
    target 'scales' (clouds only) shifts log scales by k * ln(2)/2 per
    component. Returns a perturbed copy; k=0 returns an identical copy.
    """
    if k < 0.0:
        raise ValueError("noise intensity k must be non-negative")
    rng = np.random.default_rng(seed)
    if isinstance(obj, SceneBundle):
        if target != "coordinates":
            raise ValueError("scene bundles only support coordinate noise")
        sigma = COORD_NOISE_FRACTION * obj.extent
        new_points = obj.init_positions + k * sigma * rng.standard_normal(obj.init_positions.shape)
        return SceneBundle(
            train_cameras=obj.train_cameras,
            test_cameras=obj.test_cameras,
            images=obj.images,
            init_positions=new_points,
            init_colors=obj.init_colors.copy(),
            extent=obj.extent,
            background=obj.background,
        )
    if isinstance(obj, GaussianCloud):
        out = obj.copy()
        if target == "coordinates":
            if extent is None:
                raise ValueError("coordinate noise on a cloud requires the scene extent")
            sigma = COORD_NOISE_FRACTION * extent
            out.positions = out.positions + k * sigma * rng.standard_normal(out.positions.shape)
        elif target == "scales":
            out.log_scales = out.log_scales + k * SCALE_NOISE_SIGMA * rng.standard_normal(out.log_scales.shape)
        else:
            raise ValueError(f"unknown noise target {target!r}")
        return out
    raise TypeError(f"cannot inject noise into {type(obj).__name__}")


def resample_init(points: np.ndarray, factor: int, seed: int, extent: float) -> np.ndarray:
    """Emulate a low-quality dense initialization by jittered duplication.

    Each point gains (factor - 1) copies displaced by Gaussian jitter with an
    RMS displacement of 0.5% of the scene extent.
    """
    if factor < 1:
        raise ValueError("resample factor must be >= 1")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if factor == 1:
        return points.copy()
    rng = np.random.default_rng(seed)
    sigma = RESAMPLE_JITTER_FRACTION * extent / np.sqrt(3.0)
    copies = np.repeat(points, factor - 1, axis=0)
    copies = copies + sigma * rng.standard_normal(copies.shape)
    return np.concatenate([points, copies])


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class SceneSpec:
    """Recipe for a synthetic ground-truth scene."""

    seed: int = 0
    object_count: int = 5
    layout: str = "orbit"
    resolution: int = 128
    n_train: int = 9
    n_test: int = 3
    gaussians_per_object: Tuple[int, int] = (60, 130)
    orbit_radius: float = 4.2
    orbit_height: float = 2.2
    init_fraction: float = 0.7
    scale_range: Tuple[float, float] = (0.05, 0.11)
    color_jitter: float = 0.12
    detail_scale_factor: float = 1.0  # < 1 makes cluster 1 finer than the rest
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n_train < 2:
            raise ValueError("need at least 2 training cameras")
        if self.n_test < 1:
            raise ValueError("need at least 1 test camera")
        if self.layout != "orbit":
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.object_count < 1:
            raise ValueError("object_count must be >= 1")


# Saturated base colors assigned to clusters round-robin.
_PALETTE = np.array(
    [
        [0.90, 0.25, 0.20],
        [0.20, 0.70, 0.90],
        [0.95, 0.80, 0.25],
        [0.30, 0.85, 0.35],
        [0.80, 0.35, 0.85],
        [0.95, 0.55, 0.20],
        [0.35, 0.40, 0.95],
        [0.70, 0.90, 0.45],
    ]
)


def _orbit_cameras(spec: SceneSpec, target: np.ndarray) -> Tuple[List[Camera], List[int]]:
    """All orbit-slot cameras plus the indices held out for testing."""
    n_slots = spec.n_train + spec.n_test
    res = spec.resolution
    f = 0.9 * res
    cams = []
    for i in range(n_slots):
        az = 2.0 * np.pi * i / n_slots
        eye = np.array([spec.orbit_radius * np.cos(az), spec.orbit_height, spec.orbit_radius * np.sin(az)])
        R, t = look_at(eye, target)
        cams.append(
            Camera(
                id=f"cam{i:02d}",
                width=res,
                height=res,
                fx=f,
                fy=f,
                cx=res / 2.0,
                cy=res / 2.0,
                rotation=R,
                translation=t,
                near=0.1,
                far=50.0,
            )
        )
    test_slots = [int(np.floor(j * n_slots / spec.n_test)) for j in range(spec.n_test)]
    return cams, test_slots


def generate_ground_truth_cloud(spec: SceneSpec) -> GaussianCloud:
    """Clusters of colored Gaussians at mixed depths, one placed deep."""
    rng = np.random.default_rng(spec.seed)
    positions, log_scales, rotations, logits, colors = [], [], [], [], []
    for ci in range(spec.object_count):
        n_g = int(rng.integers(spec.gaussians_per_object[0], spec.gaussians_per_object[1] + 1))
        if ci == 0:
            # Deep cluster: below the camera plane, lowest sampling rate.
            center = np.array([0.0, -2.2, 0.0])
            sigma_c = 0.45
        else:
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = rng.uniform(0.0, 1.1)
            center = np.array([rad * np.cos(ang), rng.uniform(-0.5, 0.4), rad * np.sin(ang)])
            sigma_c = rng.uniform(0.25, 0.45)
        positions.append(center + sigma_c * rng.standard_normal((n_g, 3)))
        lo, hi = spec.scale_range
        if ci == 1:  # one cluster carries finer structure than the rest
            lo, hi = lo * spec.detail_scale_factor, hi * spec.detail_scale_factor
        base = np.log(rng.uniform(lo, hi, size=(n_g, 1)))
        aniso = rng.uniform(-0.45, 0.45, size=(n_g, 3))
        log_scales.append(base + aniso)
        q = rng.standard_normal((n_g, 4))
        rotations.append(q / np.linalg.norm(q, axis=1, keepdims=True))
        logits.append(rng.uniform(1.4, 3.0, size=n_g))
        base_rgb = _PALETTE[ci % len(_PALETTE)]
        rgb = np.clip(base_rgb + rng.uniform(-spec.color_jitter, spec.color_jitter, size=(n_g, 3)), 0.05, 0.95)
        colors.append((rgb - 0.5) / SH_C0)
    return GaussianCloud(
        positions=np.concatenate(positions),
        log_scales=np.concatenate(log_scales),
        rotations=np.concatenate(rotations),
        opacity_logits=np.concatenate(logits),
        colors=np.concatenate(colors),
    )


def generate_synthetic_scene(spec: SceneSpec) -> Tuple[SceneBundle, GaussianCloud]:
    """Fabricate a scene: ground truth cloud, cameras, targets and init points.

    Target images are the PNG-quantized renders of the ground-truth cloud, so
    re-rendering it reproduces the stored targets bitwise. Deterministic per
    seed.
    """
    gt = generate_ground_truth_cloud(spec)
    look_target = np.array([0.0, -0.3, 0.0])
    cams, test_slots = _orbit_cameras(spec, look_target)

    span = gt.positions.max(axis=0) - gt.positions.min(axis=0)
    extent = float(np.linalg.norm(span))

    images = {}
    for cam in cams:
        img = render(gt, cam, spec.background)
        images[cam.id] = quantize_image(img.rgb)

    rng = np.random.default_rng(spec.seed + 1)
    n_init = max(8, int(round(spec.init_fraction * gt.count)))
    n_init = min(n_init, gt.count)
    pick = rng.choice(gt.count, size=n_init, replace=False)
    pick.sort()
    jitter = RESAMPLE_JITTER_FRACTION * extent / np.sqrt(3.0)
    init_positions = gt.positions[pick] + jitter * rng.standard_normal((n_init, 3))
    init_colors = np.clip(0.5 + SH_C0 * gt.colors[pick], 0.0, 1.0)

    test_ids = {cams[i].id for i in test_slots}
    bundle = SceneBundle(
        train_cameras=[c for c in cams if c.id not in test_ids],
        test_cameras=[cams[i] for i in test_slots],
        images=images,
        init_positions=init_positions,
        init_colors=init_colors,
        extent=extent,
        background=spec.background,
    )
    return bundle, gt


# ---------------------------------------------------------------------------
# Scene directory layout: manifest + cameras + images + init PLY
# ---------------------------------------------------------------------------


def write_scene(bundle: SceneBundle, out_dir, gt_cloud: Optional[GaussianCloud] = None) -> Path:
    """Write a scene directory; returns the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    all_cams = bundle.train_cameras + bundle.test_cameras
    for cam in all_cams:
        cam.image_path = f"images/{cam.id}.png"
        save_image(bundle.images[cam.id], out / cam.image_path)
    save_cameras(all_cams, out / "cameras.json")

    init_cloud = build_initial_cloud(bundle.init_positions, bundle.init_colors)
    save_ply(init_cloud, out / "init.ply")
    if gt_cloud is not None:
        save_ply(gt_cloud, out / "ground_truth.ply")

    manifest = {
        "extent": bundle.extent,
        "background": list(bundle.background),
        "cameras_path": "cameras.json",
        "train": [{"camera_id": c.id, "image_path": c.image_path} for c in bundle.train_cameras],
        "test": [{"camera_id": c.id, "image_path": c.image_path} for c in bundle.test_cameras],
        "init_ply_path": "init.ply",
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_scene(manifest_path) -> SceneBundle:
    """Load a scene directory back into memory."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    root = manifest_path.parent
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneFormatError(f"cannot read manifest {manifest_path}: {exc}") from exc

    cams = {c.id: c for c in load_cameras(root / manifest["cameras_path"])}
    images = {}

    def collect(entries):
        out = []
        for e in entries:
            cam = cams[e["camera_id"]]
            images[cam.id] = load_image(root / e["image_path"])
            out.append(cam)
        return out

    train = collect(manifest["train"])
    test = collect(manifest["test"])
    init_cloud = load_ply(root / manifest["init_ply_path"])
    return SceneBundle(
        train_cameras=train,
        test_cameras=test,
        images=images,
        init_positions=init_cloud.positions,
        init_colors=np.clip(0.5 + SH_C0 * init_cloud.colors, 0.0, 1.0),
        extent=float(manifest["extent"]),
        background=tuple(manifest.get("background", (0.0, 0.0, 0.0))),
    )
