"""Finite-difference verification of the analytic rendering backward pass."""

import numpy as np
import pytest

from conftest import check_scene_gradients, random_scene

from splatlab.losses import image_loss
from splatlab.rasterizer import render_backward, render_forward


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_gradients_match_finite_differences(seed):
    cloud, cam, background, weights = random_scene(seed)
    checked, failures = check_scene_gradients(cloud, cam, background, weights)
    assert checked > 0
    assert not failures, "\n".join(failures[:20])


@pytest.mark.parametrize("seed", [10, 11])
def test_gradients_with_degree1_color(seed):
    cloud, cam, background, weights = random_scene(seed, max_gaussians=10, with_sh1=True)
    checked, failures = check_scene_gradients(cloud, cam, background, weights)
    assert checked > 0
    assert not failures, "\n".join(failures[:20])


def test_training_loss_gradient_chain():
    # End-to-end: d(image_loss)/d(params) via the rasterizer backward matches
    # finite differences of the scalar loss.
    cloud, cam, background, _ = random_scene(42, max_gaussians=8)
    rng = np.random.default_rng(7)
    target = rng.uniform(0.05, 0.95, (cam.height, cam.width, 3))

    def loss_value():
        image, _ = render_forward(cloud, cam, background)
        value, _ = image_loss(image.rgb, target, ssim_weight=0.2)
        return value

    image, ctx = render_forward(cloud, cam, background)
    _, upstream = image_loss(image.rgb, target, ssim_weight=0.2)
    grads = render_backward(cloud, cam, background, upstream, context=ctx, update_stats=False)

    h = 1e-5
    rng_idx = np.random.default_rng(8)
    for name in ("positions", "log_scales", "opacity_logits", "colors"):
        arr = getattr(cloud, name)
        analytic = getattr(grads, name).reshape(-1)
        flat = arr.reshape(-1)
        for i in rng_idx.choice(flat.size, size=min(5, flat.size), replace=False):
            saved = flat[i]
            flat[i] = saved + h
            up = loss_value()
            flat[i] = saved - h
            down = loss_value()
            flat[i] = saved
            fd = (up - down) / (2.0 * h)
            assert analytic[i] == pytest.approx(fd, rel=1e-3, abs=1e-7), f"{name}[{i}]"
