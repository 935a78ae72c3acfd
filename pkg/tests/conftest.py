"""Shared test fixtures and the finite-difference gradient oracle."""

import numpy as np

from splatlab.cameras import Camera, look_at
from splatlab.gaussians import GaussianCloud, inverse_sigmoid
from splatlab.rasterizer import render_backward, render_forward


def random_scene(seed, max_gaussians=20, size=32, with_sh1=False):
    """A random cloud/camera pair sized for f64 finite-difference checks.

    Opacities, colors and footprints stay away from the compositing
    thresholds so the loss is differentiable at the sampled point.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, max_gaussians + 1))
    eye = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), -4.0])
    R, t = look_at(eye, np.zeros(3))
    cam = Camera(
        id="grad",
        width=size,
        height=size,
        fx=1.25 * size,
        fy=1.25 * size,
        cx=size / 2.0,
        cy=size / 2.0,
        rotation=R,
        translation=t,
        near=0.1,
        far=50.0,
    )
    cloud = GaussianCloud(
        positions=np.column_stack(
            [rng.uniform(-0.9, 0.9, n), rng.uniform(-0.9, 0.9, n), rng.uniform(-0.8, 0.8, n)]
        ),
        log_scales=rng.uniform(np.log(0.08), np.log(0.35), (n, 3)),
        rotations=rng.standard_normal((n, 4)),
        opacity_logits=inverse_sigmoid(rng.uniform(0.2, 0.85, n)),
        colors=rng.uniform(-1.2, 1.2, (n, 3)),
        sh1=rng.uniform(-0.15, 0.15, (n, 9)) if with_sh1 else None,
    )
    background = rng.uniform(0.1, 0.9, 3)
    weights = rng.standard_normal((size, size, 3))
    return cloud, cam, background, weights


PARAM_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "colors", "sh1")


def check_scene_gradients(cloud, cam, background, weights, h=1e-5, rel_tol=1e-3, abs_floor=1e-6):
    """Compare every analytic parameter gradient against central differences.

    Returns (checked, failures) where failures is a list of mismatch
    descriptions; the criterion is relative error <= rel_tol for gradients
    of magnitude >= 1e-3 and absolute error <= abs_floor below that.
    """

    def objective():
        image, _ = render_forward(cloud, cam, background)
        return float(np.sum(image.rgb * weights))

    grads = render_backward(cloud, cam, background, weights, update_stats=False)
    failures = []
    checked = 0
    for name in PARAM_FIELDS:
        arr = getattr(cloud, name)
        if arr is None:
            continue
        analytic = getattr(grads, name).reshape(-1)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            up = objective()
            flat[i] = saved - h
            down = objective()
            flat[i] = saved
            fd = (up - down) / (2.0 * h)
            an = analytic[i]
            checked += 1
            if abs(fd) >= 1e-3:
                ok = abs(an - fd) <= rel_tol * abs(fd)
            else:
                ok = abs(an - fd) <= abs_floor
            if not ok:
                failures.append(f"{name}[{i}]: analytic={an:.8g} fd={fd:.8g}")
    return checked, failures
