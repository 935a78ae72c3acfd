"""Differentiable splatting renderer.

Forward path: each Gaussian is projected to the image with the first-order
perspective Jacobian (cov2d = J W Sigma W^T J^T, dilated by +0.3 px^2), binned
into 16x16 tiles in depth order, and composited front to back per pixel. The
backward path mirrors the compositing exactly and chains the 2D gradients back
through projection, covariance construction and color evaluation to every
Gaussian parameter.

Also provides the fixed low-pass covariance regularizer used as a comparison
baseline: it widens each observed Gaussian by an isotropic term scaled to its
sampling rate at render time, leaving parameters untouched.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._compositing import composite_backward, composite_forward
from .cameras import Camera, DEFAULT_GUARD_BAND
from .gaussians import SH_C0, SH_C1, Gaussian, GaussianCloud, rotation_matrices, sigmoid

TILE_SIZE = 16
COV2D_DILATION = 0.3
FOOTPRINT_SIGMAS = 3.0
DEFAULT_LOWPASS_KAPPA = 0.2


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (2, 2) pixel^2, dilated
    depth: float
    color: np.ndarray  # (3,) evaluated RGB
    alpha: float


@dataclass
class RenderedImage:
    width: int
    height: int
    rgb: np.ndarray  # (H, W, 3) clamped to [0, 1]
    alpha_accum: np.ndarray  # (H, W) = 1 - residual transmittance


@dataclass
class GaussianGradients:
    """Per-Gaussian parameter gradients plus densification statistics."""

    positions: np.ndarray  # (N, 3)
    log_scales: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3)
    sh1: Optional[np.ndarray]  # (N, 9) or None
    screen_grad_norm: np.ndarray  # (N,) per-render ||dL/dmean2d||
    observed: np.ndarray  # (N,) bool, rasterized this render


def apply_lowpass_baseline(covariances: np.ndarray, rates: np.ndarray, kappa: float = DEFAULT_LOWPASS_KAPPA):
    """Widen covariances by (kappa/rate)^2 * I; unobserved rows are flagged and untouched."""
    cov = np.array(covariances, dtype=np.float64, copy=True)
    rates = np.asarray(rates, dtype=np.float64).reshape(-1)
    observed = rates > 0.0
    add = np.zeros_like(rates)
    add[observed] = (kappa / rates[observed]) ** 2
    cov[:, 0, 0] += add
    cov[:, 1, 1] += add
    cov[:, 2, 2] += add
    return cov, ~observed


def _evaluate_colors(cloud: GaussianCloud, cam: Camera):
    """Per-Gaussian RGB from color coefficients.

    Returns (rgb, clamp_mask, dirn, inv_norm); the direction terms are None
    for clouds without degree-1 coefficients. rgb is clamped at zero from
    below, clamp_mask marks where the raw value was positive (gradient
    passes only there).
    """
    raw = 0.5 + SH_C0 * cloud.colors
    dirn = None
    inv_norm = None
    if cloud.sh1 is not None:
        d = cloud.positions - cam.center
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        inv_norm = 1.0 / np.maximum(norm, 1e-12)
        dirn = d * inv_norm
        sh = cloud.sh1.reshape(-1, 3, 3)  # [gaussian, channel, basis]
        x, y, z = dirn[:, 0:1], dirn[:, 1:2], dirn[:, 2:3]
        raw = raw + SH_C1 * (-y * sh[:, :, 0] + z * sh[:, :, 1] - x * sh[:, :, 2])
    mask = raw > 0.0
    return np.maximum(raw, 0.0), mask, dirn, inv_norm


class RenderContext:
    """Intermediate state of one forward render, reused by the backward pass."""

    def __init__(self):
        self.keep = None  # (M,) original indices of the surviving Gaussians
        self.rasterized = None  # (N,) bool: covers at least one image tile
        self.xcam = None  # (M, 3)
        self.mean2d = None  # (M, 2)
        self.conic = None  # (M, 3)
        self.radius = None  # (M,) 3-sigma footprint radius in pixels
        self.sigma = None  # (M, 3, 3) world covariance used for projection
        self.m_jw = None  # (M, 2, 3) J @ W
        self.m3 = None  # (M, 3, 3) R @ diag(s)
        self.rot = None  # (M, 3, 3)
        self.q_hat = None  # (M, 4)
        self.q_norm = None  # (M,)
        self.s = None  # (M, 3)
        self.rgb_g = None  # (M, 3) evaluated color
        self.color_mask = None  # (M, 3) clamp mask
        self.dirn = None
        self.inv_norm = None
        self.alpha = None  # (M,)
        self.pair_gauss = None  # (P,)
        self.tile_start = None  # (T+1,)
        self.n_tiles_x = 0
        self.pix_rgb = None  # (H, W, 3) unclamped
        self.pix_t = None  # (H, W)
        self.pix_nc = None  # (H, W)


def _project_all(cloud: GaussianCloud, cam: Camera, lowpass_rates=None, lowpass_kappa=DEFAULT_LOWPASS_KAPPA):
    """Project every Gaussian; returns a partially filled RenderContext."""
    ctx = RenderContext()
    n = cloud.count
    W = cam.rotation

    q = cloud.rotations
    q_norm = np.linalg.norm(q, axis=1)
    if np.any(q_norm == 0.0):
        raise ValueError("zero-norm quaternion in cloud")
    q_hat = q / q_norm[:, None]
    R = rotation_matrices(q_hat)
    s = np.exp(cloud.log_scales)
    m3 = R * s[:, None, :]
    sigma = m3 @ np.swapaxes(m3, 1, 2)
    if lowpass_rates is not None:
        sigma, _ = apply_lowpass_baseline(sigma, lowpass_rates, lowpass_kappa)

    xcam = cloud.positions @ W.T + cam.translation
    z = xcam[:, 2]
    in_front = z > cam.near

    keep = np.flatnonzero(in_front)
    xc = xcam[keep]
    zc = xc[:, 2]
    u = cam.fx * xc[:, 0] / zc + cam.cx
    v = cam.fy * xc[:, 1] / zc + cam.cy
    mean2d = np.stack([u, v], axis=1)

    J = np.zeros((keep.size, 2, 3), dtype=np.float64)
    J[:, 0, 0] = cam.fx / zc
    J[:, 0, 2] = -cam.fx * xc[:, 0] / zc**2
    J[:, 1, 1] = cam.fy / zc
    J[:, 1, 2] = -cam.fy * xc[:, 1] / zc**2
    m_jw = J @ W
    cov2d = m_jw @ sigma[keep] @ np.swapaxes(m_jw, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.0, (0.5 * (a - c)) ** 2 + b**2))
    radius = np.ceil(FOOTPRINT_SIGMAS * np.sqrt(lam_max))

    # Footprint must intersect the guard-banded image to survive.
    gu = DEFAULT_GUARD_BAND * cam.width
    gv = DEFAULT_GUARD_BAND * cam.height
    hit = (
        (u + radius >= -gu)
        & (u - radius <= cam.width + gu)
        & (v + radius >= -gv)
        & (v - radius <= cam.height + gv)
    )

    sub = np.flatnonzero(hit)
    keep = keep[sub]
    det = a[sub] * c[sub] - b[sub] ** 2
    conic = np.stack([c[sub] / det, -b[sub] / det, a[sub] / det], axis=1)

    ctx.keep = keep
    ctx.xcam = xcam[keep]
    ctx.mean2d = mean2d[sub]
    ctx.conic = conic
    ctx.radius = radius[sub]
    ctx.sigma = sigma[keep]
    ctx.m_jw = m_jw[sub]
    ctx.m3 = m3[keep]
    ctx.rot = R[keep]
    ctx.q_hat = q_hat[keep]
    ctx.q_norm = q_norm[keep]
    ctx.s = s[keep]
    ctx.alpha = sigmoid(cloud.opacity_logits[keep])
    return ctx


def _bin_tiles(ctx: RenderContext, width: int, height: int):
    """Build depth-ordered per-tile Gaussian lists (counting sort, stable)."""
    m = ctx.keep.size
    n_tiles_x = (width + TILE_SIZE - 1) // TILE_SIZE
    n_tiles_y = (height + TILE_SIZE - 1) // TILE_SIZE
    n_tiles = n_tiles_x * n_tiles_y
    ctx.n_tiles_x = n_tiles_x

    u = ctx.mean2d[:, 0]
    v = ctx.mean2d[:, 1]
    r = ctx.radius
    tx0 = np.clip(np.floor((u - r) / TILE_SIZE).astype(np.int64), 0, n_tiles_x)
    tx1 = np.clip(np.floor((u + r) / TILE_SIZE).astype(np.int64) + 1, 0, n_tiles_x)
    ty0 = np.clip(np.floor((v - r) / TILE_SIZE).astype(np.int64), 0, n_tiles_y)
    ty1 = np.clip(np.floor((v + r) / TILE_SIZE).astype(np.int64) + 1, 0, n_tiles_y)
    spans_x = np.maximum(0, tx1 - tx0)
    spans_y = np.maximum(0, ty1 - ty0)
    n_cover = spans_x * spans_y
    covered = n_cover > 0

    # Depth order with stable index tie-break; expansion in this order makes
    # every tile list arrive already depth-sorted.
    order = np.argsort(ctx.xcam[:, 2], kind="stable")
    order = order[covered[order]]
    rep = n_cover[order]
    total = int(rep.sum())

    pair_gauss = np.repeat(order, rep)
    offsets = np.concatenate([[0], np.cumsum(rep)[:-1]]) if order.size else np.zeros(0, dtype=np.int64)
    local = np.arange(total, dtype=np.int64) - np.repeat(offsets, rep)
    sx = spans_x[pair_gauss]
    tx = tx0[pair_gauss] + local % sx
    ty = ty0[pair_gauss] + local // sx
    tile_id = ty * n_tiles_x + tx

    perm = np.argsort(tile_id, kind="stable")
    pair_gauss = pair_gauss[perm]
    counts = np.bincount(tile_id, minlength=n_tiles)
    tile_start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    ctx.pair_gauss = np.ascontiguousarray(pair_gauss, dtype=np.int64)
    ctx.tile_start = tile_start
    return covered


def render_forward(
    cloud: GaussianCloud,
    cam: Camera,
    background,
    lowpass_rates=None,
    lowpass_kappa: float = DEFAULT_LOWPASS_KAPPA,
):
    """Render the cloud from cam; returns (RenderedImage, RenderContext)."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    h, w = cam.height, cam.width
    ctx = _project_all(cloud, cam, lowpass_rates, lowpass_kappa)
    covered = _bin_tiles(ctx, w, h)

    rasterized = np.zeros(cloud.count, dtype=bool)
    rasterized[ctx.keep[covered]] = True
    ctx.rasterized = rasterized

    rgb_g, mask, dirn, inv_norm = _evaluate_colors(cloud, cam)
    ctx.rgb_g = np.ascontiguousarray(rgb_g[ctx.keep])
    ctx.color_mask = mask[ctx.keep]
    ctx.dirn = None if dirn is None else dirn[ctx.keep]
    ctx.inv_norm = None if inv_norm is None else inv_norm[ctx.keep]

    pix_rgb = np.zeros((h, w, 3), dtype=np.float64)
    pix_t = np.ones((h, w), dtype=np.float64)
    pix_nc = np.zeros((h, w), dtype=np.int64)
    composite_forward(
        w,
        h,
        TILE_SIZE,
        ctx.n_tiles_x,
        np.ascontiguousarray(ctx.mean2d),
        np.ascontiguousarray(ctx.conic),
        ctx.rgb_g,
        np.ascontiguousarray(ctx.alpha),
        ctx.pair_gauss,
        ctx.tile_start,
        bg,
        pix_rgb,
        pix_t,
        pix_nc,
    )
    ctx.pix_rgb = pix_rgb
    ctx.pix_t = pix_t
    ctx.pix_nc = pix_nc

    image = RenderedImage(width=w, height=h, rgb=np.clip(pix_rgb, 0.0, 1.0), alpha_accum=1.0 - pix_t)
    return image, ctx


def render(cloud: GaussianCloud, cam: Camera, background, **kwargs) -> RenderedImage:
    image, _ = render_forward(cloud, cam, background, **kwargs)
    return image


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    background,
    grad_rgb: np.ndarray,
    context: Optional[RenderContext] = None,
    update_stats: bool = True,
    lowpass_rates=None,
    lowpass_kappa: float = DEFAULT_LOWPASS_KAPPA,
) -> GaussianGradients:
    """Analytic gradients of render() contracted with per-pixel grad_rgb.

    Accumulates the screen-space positional gradient norm and an observation
    count into the cloud's statistics arrays unless update_stats is False.
    """
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (cam.height, cam.width, 3):
        raise ValueError(f"grad_rgb shape {grad_rgb.shape} does not match {(cam.height, cam.width, 3)}")
    if context is None:
        _, context = render_forward(cloud, cam, background, lowpass_rates=lowpass_rates, lowpass_kappa=lowpass_kappa)
    ctx = context
    n = cloud.count
    m = ctx.keep.size
    h, w = cam.height, cam.width

    # Output pixels were clamped to [0,1]; gradient passes only inside.
    inside = (ctx.pix_rgb >= 0.0) & (ctx.pix_rgb <= 1.0)
    grad_masked = np.where(inside, grad_rgb, 0.0)

    d_mean2d = np.zeros((m, 2), dtype=np.float64)
    d_conic = np.zeros((m, 3), dtype=np.float64)
    d_color = np.zeros((m, 3), dtype=np.float64)
    d_alpha = np.zeros(m, dtype=np.float64)
    composite_backward(
        w,
        h,
        TILE_SIZE,
        ctx.n_tiles_x,
        np.ascontiguousarray(ctx.mean2d),
        np.ascontiguousarray(ctx.conic),
        ctx.rgb_g,
        np.ascontiguousarray(ctx.alpha),
        ctx.pair_gauss,
        ctx.tile_start,
        ctx.pix_rgb,
        ctx.pix_nc,
        np.ascontiguousarray(grad_masked),
        d_mean2d,
        d_conic,
        d_color,
        d_alpha,
    )

    grads = GaussianGradients(
        positions=np.zeros((n, 3)),
        log_scales=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)),
        opacity_logits=np.zeros(n),
        colors=np.zeros((n, 3)),
        sh1=None if cloud.sh1 is None else np.zeros((n, 9)),
        screen_grad_norm=np.zeros(n),
        observed=ctx.rasterized.copy(),
    )
    if m > 0:
        _chain_to_parameters(cloud, cam, ctx, d_mean2d, d_conic, d_color, d_alpha, grads)

    if update_stats:
        obs = grads.observed
        cloud.grad_accum[obs] += grads.screen_grad_norm[obs]
        cloud.obs_count[obs] += 1
    return grads


def _chain_to_parameters(cloud, cam, ctx, d_mean2d, d_conic, d_color, d_alpha, grads):
    """Chain 2D-space gradients back to the 3D Gaussian parameters."""
    keep = ctx.keep
    W = cam.rotation
    xc = ctx.xcam
    x, y, z = xc[:, 0], xc[:, 1], xc[:, 2]

    # conic = inv(cov2d): dL/dcov2d = -conic @ dL/dconic_full @ conic.
    conic_full = np.empty((keep.size, 2, 2))
    conic_full[:, 0, 0] = ctx.conic[:, 0]
    conic_full[:, 0, 1] = conic_full[:, 1, 0] = ctx.conic[:, 1]
    conic_full[:, 1, 1] = ctx.conic[:, 2]
    g_conic = np.empty((keep.size, 2, 2))
    g_conic[:, 0, 0] = d_conic[:, 0]
    g_conic[:, 0, 1] = g_conic[:, 1, 0] = 0.5 * d_conic[:, 1]
    g_conic[:, 1, 1] = d_conic[:, 2]
    g_cov2d = -conic_full @ g_conic @ conic_full

    # cov2d = M Sigma M^T (+ dilation): gradients toward Sigma and M = J W.
    M = ctx.m_jw
    g_sigma = np.swapaxes(M, 1, 2) @ g_cov2d @ M
    g_m = 2.0 * g_cov2d @ M @ ctx.sigma
    g_j = g_m @ W.T

    fx, fy = cam.fx, cam.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    g_xcam = np.zeros_like(xc)
    # Projection of the mean: u = fx x / z + cx, v = fy y / z + cy.
    g_xcam[:, 0] += d_mean2d[:, 0] * fx * inv_z
    g_xcam[:, 1] += d_mean2d[:, 1] * fy * inv_z
    g_xcam[:, 2] += -d_mean2d[:, 0] * fx * x * inv_z2 - d_mean2d[:, 1] * fy * y * inv_z2
    # The Jacobian itself depends on the camera-space position.
    g_xcam[:, 0] += g_j[:, 0, 2] * (-fx * inv_z2)
    g_xcam[:, 1] += g_j[:, 1, 2] * (-fy * inv_z2)
    g_xcam[:, 2] += (
        g_j[:, 0, 0] * (-fx * inv_z2)
        + g_j[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
        + g_j[:, 1, 1] * (-fy * inv_z2)
        + g_j[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z)
    )
    g_pos = g_xcam @ W

    # Color: clamp mask, DC term, optional degree-1 terms and their
    # view-direction dependence on the position.
    g_rgb_raw = d_color * ctx.color_mask
    g_dc = SH_C0 * g_rgb_raw
    g_sh1 = None
    if cloud.sh1 is not None:
        sh = cloud.sh1[keep].reshape(-1, 3, 3)
        dirn = ctx.dirn
        dx, dy, dz = dirn[:, 0:1], dirn[:, 1:2], dirn[:, 2:3]
        g_sh1 = np.empty((keep.size, 3, 3))
        g_sh1[:, :, 0] = -SH_C1 * dy * g_rgb_raw
        g_sh1[:, :, 1] = SH_C1 * dz * g_rgb_raw
        g_sh1[:, :, 2] = -SH_C1 * dx * g_rgb_raw
        g_dirn = np.stack(
            [
                -SH_C1 * np.sum(g_rgb_raw * sh[:, :, 2], axis=1),
                -SH_C1 * np.sum(g_rgb_raw * sh[:, :, 0], axis=1),
                SH_C1 * np.sum(g_rgb_raw * sh[:, :, 1], axis=1),
            ],
            axis=1,
        )
        # dirn = d / ||d||: project out the radial component.
        radial = np.sum(g_dirn * dirn, axis=1, keepdims=True)
        g_pos = g_pos + (g_dirn - radial * dirn) * ctx.inv_norm

    # Sigma = M3 M3^T with M3 = R diag(s).
    g_m3 = (g_sigma + np.swapaxes(g_sigma, 1, 2)) @ ctx.m3
    g_s = np.einsum("nij,nij->nj", g_m3, ctx.rot)
    g_log_s = g_s * ctx.s
    g_r = g_m3 * ctx.s[:, None, :]
    g_q = _rotation_backward(ctx.q_hat, g_r)
    radial_q = np.sum(g_q * ctx.q_hat, axis=1, keepdims=True)
    g_q_raw = (g_q - radial_q * ctx.q_hat) / ctx.q_norm[:, None]

    a = ctx.alpha
    g_logit = d_alpha * a * (1.0 - a)

    grads.positions[keep] = g_pos
    grads.log_scales[keep] = g_log_s
    grads.rotations[keep] = g_q_raw
    grads.opacity_logits[keep] = g_logit
    grads.colors[keep] = g_dc
    if g_sh1 is not None:
        grads.sh1[keep] = g_sh1.reshape(-1, 9)
    # Densification statistic: positional gradient in normalized device
    # coordinates (pixel gradient times half the image size), which keeps the
    # threshold scale independent of rendering resolution.
    ndc_scale = 0.5 * np.array([cam.width, cam.height])
    grads.screen_grad_norm[keep] = np.linalg.norm(d_mean2d * ndc_scale, axis=1)


def _rotation_backward(q_hat: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """Gradient of sum(g_r * R(q_hat)) with respect to the unit quaternion."""
    w, x, y, z = q_hat[:, 0], q_hat[:, 1], q_hat[:, 2], q_hat[:, 3]
    G = g_r
    gw = 2.0 * (
        -z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1]
    )
    gx = 2.0 * (
        y * G[:, 0, 1]
        + z * G[:, 0, 2]
        + y * G[:, 1, 0]
        - 2.0 * x * G[:, 1, 1]
        - w * G[:, 1, 2]
        + z * G[:, 2, 0]
        + w * G[:, 2, 1]
        - 2.0 * x * G[:, 2, 2]
    )
    gy = 2.0 * (
        -2.0 * y * G[:, 0, 0]
        + x * G[:, 0, 1]
        + w * G[:, 0, 2]
        + x * G[:, 1, 0]
        + z * G[:, 1, 2]
        - w * G[:, 2, 0]
        + z * G[:, 2, 1]
        - 2.0 * y * G[:, 2, 2]
    )
    gz = 2.0 * (
        -2.0 * z * G[:, 0, 0]
        - w * G[:, 0, 1]
        + x * G[:, 0, 2]
        + w * G[:, 1, 0]
        - 2.0 * z * G[:, 1, 1]
        + y * G[:, 1, 2]
        + x * G[:, 2, 0]
        + y * G[:, 2, 1]
    )
    return np.stack([gw, gx, gy, gz], axis=1)


def project_gaussian(g: Gaussian, cam: Camera) -> Optional[ProjectedGaussian]:
    """Project a single Gaussian; None when culled (behind near plane or
    3-sigma footprint outside the guard-banded image)."""
    cloud = GaussianCloud(
        positions=g.position[None],
        log_scales=g.log_scale[None],
        rotations=g.rotation[None],
        opacity_logits=np.array([g.opacity_logit]),
        colors=g.color[None],
        sh1=None if g.sh1 is None else g.sh1[None],
    )
    ctx = _project_all(cloud, cam)
    if ctx.keep.size == 0:
        return None
    cov2d = np.linalg.inv(
        np.array(
            [
                [ctx.conic[0, 0], ctx.conic[0, 1]],
                [ctx.conic[0, 1], ctx.conic[0, 2]],
            ]
        )
    )
    rgb, _, _, _ = _evaluate_colors(cloud, cam)
    return ProjectedGaussian(
        mean2d=ctx.mean2d[0],
        cov2d=cov2d,
        depth=float(ctx.xcam[0, 2]),
        color=rgb[0],
        alpha=float(ctx.alpha[0]),
    )
