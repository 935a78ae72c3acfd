"""Per-pixel alpha-compositing kernels (forward and backward).

Tiles are walked one at a time; inside a tile every pixel consumes the
tile's depth-sorted Gaussian list front to back. The backward kernel
re-walks exactly the pairs the forward pass consumed (per-pixel contributor
counts are recorded) and accumulates gradients with respect to each
Gaussian's 2D mean, conic, color and alpha. Loops are single-threaded in a
fixed order so results are bitwise reproducible.
"""

import numpy as np
from numba import njit

# Contribution skip and termination thresholds follow the reference pipeline.
ALPHA_SKIP = 1.0 / 255.0
ALPHA_CLAMP = 0.99
TRANSMITTANCE_EPS = 1e-4
# alpha*G < 1/255 is implied whenever m > 2*ln(255) (alpha < 1), so the
# exponential can be skipped there without changing any output.
M_SKIP = 2.0 * np.log(255.0)


@njit(cache=True)
def composite_forward(
    width,
    height,
    tile_size,
    n_tiles_x,
    mean2d,  # (M, 2) float64
    conic,  # (M, 3) float64: inverse-covariance entries (A, B, C)
    color,  # (M, 3) float64
    alpha,  # (M,) float64
    pair_gauss,  # (P,) int64 compact Gaussian index per tile entry
    tile_start,  # (T+1,) int64 offsets into pair_gauss
    background,  # (3,) float64
    out_rgb,  # (H, W, 3) float64, unclamped, includes background
    out_t,  # (H, W) float64 residual transmittance
    out_nc,  # (H, W) int64 pairs consumed per pixel
):
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        lo = tile_start[t]
        hi = tile_start[t + 1]
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        r0 = ty * tile_size
        r1 = min(r0 + tile_size, height)
        c0 = tx * tile_size
        c1 = min(c0 + tile_size, width)
        for r in range(r0, r1):
            py = r + 0.5
            for c in range(c0, c1):
                px = c + 0.5
                trans = 1.0
                acc0 = 0.0
                acc1 = 0.0
                acc2 = 0.0
                nc = 0
                for k in range(lo, hi):
                    g = pair_gauss[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    m = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m < 0.0 or m > M_SKIP:
                        continue
                    a = alpha[g] * np.exp(-0.5 * m)
                    if a > ALPHA_CLAMP:
                        a = ALPHA_CLAMP
                    if a < ALPHA_SKIP:
                        continue
                    trans_new = trans * (1.0 - a)
                    if trans_new < TRANSMITTANCE_EPS:
                        break
                    w = a * trans
                    acc0 += color[g, 0] * w
                    acc1 += color[g, 1] * w
                    acc2 += color[g, 2] * w
                    trans = trans_new
                    nc = k - lo + 1
                out_rgb[r, c, 0] = acc0 + background[0] * trans
                out_rgb[r, c, 1] = acc1 + background[1] * trans
                out_rgb[r, c, 2] = acc2 + background[2] * trans
                out_t[r, c] = trans
                out_nc[r, c] = nc


@njit(cache=True)
def composite_backward(
    width,
    height,
    tile_size,
    n_tiles_x,
    mean2d,
    conic,
    color,
    alpha,
    pair_gauss,
    tile_start,
    pix_rgb,  # (H, W, 3) unclamped forward output (includes background)
    pix_nc,  # (H, W) pairs consumed per pixel
    grad_rgb,  # (H, W, 3) upstream gradient, clamp mask already applied
    d_mean2d,  # (M, 2) out
    d_conic,  # (M, 3) out
    d_color,  # (M, 3) out
    d_alpha,  # (M,) out
):
    n_tiles = tile_start.shape[0] - 1
    for t in range(n_tiles):
        lo = tile_start[t]
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        r0 = ty * tile_size
        r1 = min(r0 + tile_size, height)
        c0 = tx * tile_size
        c1 = min(c0 + tile_size, width)
        for r in range(r0, r1):
            py = r + 0.5
            for c in range(c0, c1):
                g0 = grad_rgb[r, c, 0]
                g1 = grad_rgb[r, c, 1]
                g2 = grad_rgb[r, c, 2]
                if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                px = c + 0.5
                total0 = pix_rgb[r, c, 0]
                total1 = pix_rgb[r, c, 1]
                total2 = pix_rgb[r, c, 2]
                trans = 1.0
                pre0 = 0.0
                pre1 = 0.0
                pre2 = 0.0
                last = lo + pix_nc[r, c]
                for k in range(lo, last):
                    g = pair_gauss[k]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    ca = conic[g, 0]
                    cb = conic[g, 1]
                    cc = conic[g, 2]
                    m = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if m < 0.0 or m > M_SKIP:
                        continue
                    gauss = np.exp(-0.5 * m)
                    a = alpha[g] * gauss
                    clamped = a > ALPHA_CLAMP
                    if clamped:
                        a = ALPHA_CLAMP
                    if a < ALPHA_SKIP:
                        continue
                    w = a * trans
                    d_color[g, 0] += w * g0
                    d_color[g, 1] += w * g1
                    d_color[g, 2] += w * g2
                    pre0 += color[g, 0] * w
                    pre1 += color[g, 1] * w
                    pre2 += color[g, 2] * w
                    # Everything strictly behind this pair, background included,
                    # carries a 1/(1-a) dependence on its alpha.
                    inv = 1.0 / (1.0 - a)
                    da = (
                        (color[g, 0] * trans - (total0 - pre0) * inv) * g0
                        + (color[g, 1] * trans - (total1 - pre1) * inv) * g1
                        + (color[g, 2] * trans - (total2 - pre2) * inv) * g2
                    )
                    if not clamped:
                        d_alpha[g] += gauss * da
                        dm = alpha[g] * da * (-0.5) * gauss
                        d_conic[g, 0] += dm * dx * dx
                        d_conic[g, 1] += dm * 2.0 * dx * dy
                        d_conic[g, 2] += dm * dy * dy
                        d_mean2d[g, 0] -= dm * (2.0 * ca * dx + 2.0 * cb * dy)
                        d_mean2d[g, 1] -= dm * (2.0 * cb * dx + 2.0 * cc * dy)
                    trans *= 1.0 - a
