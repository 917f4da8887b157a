"""Analytic rasterizer gradients against central finite differences."""

import numpy as np
import pytest

from headsplat.cloud import GaussianPrimitives
from headsplat.rasterizer import GradientSet, render_backward, render_tiled
from _gradcheck import GRAD_FLOOR, GRAD_TOL, check_render_gradients, prims_of, raw_vector_of
from _scenes import random_primitives, simple_camera


def test_zero_upstream_gives_zero_gradients():
    prims = random_primitives(10, 0)
    cam = simple_camera(32, 32, 40.0)
    grads = render_backward(prims, cam, np.zeros((32, 32, 3)))
    assert np.array_equal(grads.d_position, np.zeros((10, 3)))
    assert np.array_equal(grads.d_rotation, np.zeros((10, 4)))
    assert np.array_equal(grads.d_scale_raw, np.zeros((10, 3)))
    assert np.array_equal(grads.d_opacity_raw, np.zeros(10))
    assert np.array_equal(grads.d_color_raw, np.zeros((10, 3)))


def test_single_splat_color_gradient_closed_form():
    """For one splat, d/d(raw color) = sum_px alpha * sigmoid'(raw) per channel."""
    cam = simple_camera(32, 32, 40.0)
    prims = random_primitives(1, 3)
    upstream = np.zeros((32, 32, 3))
    upstream[..., 1] = 1.0  # green channel only

    from headsplat.rasterizer import project_splats
    proj = project_splats(prims, cam)
    xs = np.arange(32) + 0.5
    ys = np.arange(32) + 0.5
    ia, ib, ic = proj.inv_cov2d[0]
    dx = xs - proj.mean2d[0, 0]
    dy = ys - proj.mean2d[0, 1]
    quad = ia * (dx * dx)[None, :] + 2 * ib * dy[:, None] * dx[None, :] + ic * (dy * dy)[:, None]
    alpha = prims.opacities[0] * np.exp(-0.5 * quad)
    alpha_sum = alpha[quad <= proj.qcut[0]].sum()  # the alpha_min level-set skip
    c = prims.colors[0, 1]
    expected = alpha_sum * c * (1.0 - c)

    grads = render_backward(prims, cam, upstream)
    assert grads.d_color_raw[0, 1] == pytest.approx(expected, rel=1e-9)
    assert grads.d_color_raw[0, 0] == 0.0
    assert grads.d_color_raw[0, 2] == 0.0


def test_gradients_match_finite_differences_random_scenes():
    rng = np.random.default_rng(100)
    for seed in range(3):
        n = int(rng.integers(5, 16))
        prims = random_primitives(n, seed + 40)
        cam = simple_camera(32, 32, 40.0)
        upstream = np.random.default_rng(seed).normal(size=(32, 32, 3))
        worst, checked, _ = check_render_gradients(prims, cam, upstream)
        assert checked > 50


def test_gradients_with_background():
    prims = random_primitives(8, 77)
    cam = simple_camera(32, 32, 40.0)
    upstream = np.random.default_rng(1).normal(size=(32, 32, 3))
    bg = (0.2, 0.4, 0.6)
    grads = render_backward(prims, cam, upstream, background=bg)
    raw0 = raw_vector_of(prims)

    def value(raw):
        return float(np.sum(upstream * render_tiled(prims_of(raw), cam, background=bg).array))

    worst = 0.0
    arr = raw0["oraw"]
    for ix in np.ndindex(arr.shape):
        h = 1e-5
        plus = {k: v.copy() for k, v in raw0.items()}
        plus["oraw"][ix] += h
        minus = {k: v.copy() for k, v in raw0.items()}
        minus["oraw"][ix] -= h
        fd = (value(plus) - value(minus)) / (2.0 * h)
        an = grads.d_opacity_raw[ix]
        if abs(an) > GRAD_FLOOR or abs(fd) > GRAD_FLOOR:
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd)))
    assert worst <= GRAD_TOL


def test_culled_splats_get_zero_gradient():
    prims = random_primitives(6, 5)
    positions = prims.positions.copy()
    positions[2] = [0.0, 0.0, -1.0]  # behind the camera
    prims = GaussianPrimitives(positions, prims.rotations, prims.scales,
                               prims.opacities, prims.colors)
    cam = simple_camera(32, 32, 40.0)
    grads = render_backward(prims, cam, np.ones((32, 32, 3)))
    assert np.array_equal(grads.d_position[2], np.zeros(3))
    assert np.array_equal(grads.d_rotation[2], np.zeros(4))
    assert np.array_equal(grads.d_scale_raw[2], np.zeros(3))
    assert grads.d_opacity_raw[2] == 0.0


def test_gradient_set_add_and_scale():
    a = GradientSet.zeros(3)
    b = GradientSet.zeros(3)
    a.d_position[0, 0] = 1.0
    b.d_position[0, 0] = 2.0
    a.add(b)
    a.scale(0.5)
    assert a.d_position[0, 0] == pytest.approx(1.5)


def test_threaded_backward_matches_single():
    prims = random_primitives(120, 21)
    cam = simple_camera(96, 96, 100.0)
    upstream = np.random.default_rng(2).normal(size=(96, 96, 3))
    one = render_backward(prims, cam, upstream, threads=1)
    four = render_backward(prims, cam, upstream, threads=4)
    for field in ("d_position", "d_rotation", "d_scale_raw", "d_opacity_raw", "d_color_raw"):
        assert np.array_equal(getattr(one, field), getattr(four, field))
