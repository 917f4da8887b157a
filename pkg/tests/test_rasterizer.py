"""Forward rasterization tests: oracle equivalence, compositing, invariants."""

import numpy as np
import pytest

from headsplat.camera import Camera
from headsplat.cloud import GaussianPrimitives
from headsplat.images import ImageBuffer, read_png, to_uint8, write_png
from headsplat.rasterizer import (
    ALPHA_MIN,
    T_MIN,
    profile_render,
    render_reference,
    render_tiled,
    splat_records,
)
from _scenes import random_primitives, simple_camera


def test_empty_scene_is_black():
    cam = simple_camera()
    prims = GaussianPrimitives(np.zeros((0, 3)), np.zeros((0, 4)), np.ones((0, 3)),
                               np.zeros(0), np.zeros((0, 3)))
    img = render_reference(prims, cam, channels=4)
    assert np.array_equal(img.array, np.zeros((64, 64, 4)))
    img_t = render_tiled(prims, cam, channels=4)
    assert np.array_equal(img_t.array, np.zeros((64, 64, 4)))


def test_single_saturated_splat_center_color():
    cam = simple_camera(64, 64, 100.0)
    # mean projects exactly onto the center of pixel (32, 32)
    z = 1.0
    x = (32.5 - cam.cx) * z / cam.fx
    y = (32.5 - cam.cy) * z / cam.fy
    color = np.array([0.2, 0.7, 0.4])
    opacity = 1.0 / (1.0 + np.exp(-20.0))  # sigmoid(+20)
    prims = GaussianPrimitives([[x, y, z]], [[1, 0, 0, 0]], [[0.02, 0.02, 0.02]],
                               [opacity], [color])
    img = render_tiled(prims, cam)
    assert np.max(np.abs(img.array[32, 32] - color)) <= 1e-4


def test_two_overlapping_splats_hand_composite():
    """Front alpha 0.6 red over back alpha 0.8 blue: 0.6*red + 0.4*0.8*blue."""
    cam = simple_camera(8, 8, 100.0)
    # both means project to the center of pixel (4, 4) where g = 1 exactly
    def pos_for(z):
        return [(4.5 - cam.cx) * z / cam.fx, (4.5 - cam.cy) * z / cam.fy, z]

    prims = GaussianPrimitives(
        positions=[pos_for(0.9), pos_for(1.1)],
        rotations=[[1, 0, 0, 0], [1, 0, 0, 0]],
        scales=[[0.01] * 3, [0.01] * 3],
        opacities=[0.6, 0.8],
        colors=[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
    )
    for renderer in (render_reference, render_tiled):
        img = renderer(prims, cam)
        expected = 0.6 * np.array([1.0, 0.0, 0.0]) + 0.4 * 0.8 * np.array([0.0, 0.0, 1.0])
        assert np.allclose(img.array[4, 4], expected, atol=1e-12)


def test_oracle_equivalence_random_scenes():
    for seed in range(4):
        prims = random_primitives(150, seed)
        cam = simple_camera(96, 80, 90.0)
        ref = render_reference(prims, cam).array
        til = render_tiled(prims, cam).array
        assert np.max(np.abs(ref - til)) <= 1e-4


def test_degenerate_tiling_single_tile():
    prims = random_primitives(60, 9)
    cam = simple_camera(64, 64, 80.0)
    whole = render_tiled(prims, cam, tile_size=64).array
    ref = render_reference(prims, cam).array
    assert np.array_equal(whole, ref)


def test_scene_outside_frustum_is_black():
    prims = random_primitives(40, 3, center=(0.0, 0.0, -2.0))
    cam = simple_camera()
    img = render_tiled(prims, cam, channels=4)
    assert np.array_equal(img.array, np.zeros((64, 64, 4)))


def test_permutation_invariance():
    prims = random_primitives(200, 5)
    cam = simple_camera(72, 72, 85.0)
    base = render_tiled(prims, cam).array
    rng = np.random.default_rng(11)
    perm = rng.permutation(len(prims))
    shuffled = GaussianPrimitives(prims.positions[perm], prims.rotations[perm],
                                  prims.scales[perm], prims.opacities[perm],
                                  prims.colors[perm])
    out = render_tiled(shuffled, cam).array
    assert np.max(np.abs(out - base)) <= 1e-6


def test_equal_depth_ties_break_by_index():
    cam = simple_camera(16, 16, 50.0)
    pos = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]
    prims = GaussianPrimitives(pos, [[1, 0, 0, 0]] * 2, [[0.05] * 3] * 2,
                               [0.7, 0.7], [[1, 0, 0], [0, 1, 0]])
    img = render_tiled(prims, cam).array
    # index 0 (red) composites first
    center = img[8, 8]
    assert center[0] > center[1]


def test_accumulated_alpha_bounds():
    prims = random_primitives(300, 6, opacity_loc=2.0)
    cam = simple_camera(64, 64, 90.0)
    img = render_tiled(prims, cam, channels=4)
    alpha = img.array[..., 3]
    assert np.all(alpha >= 0.0) and np.all(alpha <= 1.0)


def test_saturated_coverage_alpha_near_one():
    # a stack of big opaque splats covering the frame: alpha >= 1 - T_MIN
    cam = simple_camera(32, 32, 40.0)
    n = 12
    positions = [[0.0, 0.0, 1.0 + 0.01 * k] for k in range(n)]
    prims = GaussianPrimitives(positions, [[1, 0, 0, 0]] * n, [[2.0, 2.0, 2.0]] * n,
                               [1.0 - 1e-9] * n, [[1.0, 1.0, 1.0]] * n)
    img = render_tiled(prims, cam, channels=4)
    assert np.min(img.array[..., 3]) >= 1.0 - T_MIN


def test_early_termination_bound():
    """Ending at transmittance < t_min changes no pixel by more than t_min."""
    prims = random_primitives(400, 7, opacity_loc=2.5)
    cam = simple_camera(64, 64, 90.0)
    exact = render_tiled(prims, cam, t_min=0.0).array
    fast = render_tiled(prims, cam, t_min=T_MIN).array
    assert np.max(np.abs(exact - fast)) <= T_MIN


def test_background_compositing():
    cam = simple_camera(32, 32, 60.0)
    prims = GaussianPrimitives(np.zeros((0, 3)), np.zeros((0, 4)), np.ones((0, 3)),
                               np.zeros(0), np.zeros((0, 3)))
    bg = (0.1, 0.5, 0.9)
    img = render_tiled(prims, cam, background=bg)
    assert np.allclose(img.array, np.broadcast_to(bg, (32, 32, 3)))


def test_faint_splats_are_skipped_in_both():
    cam = simple_camera(48, 48, 70.0)
    prims = GaussianPrimitives([[0.0, 0.0, 1.0]], [[1, 0, 0, 0]], [[0.05] * 3],
                               [0.5 * ALPHA_MIN], [[1.0, 1.0, 1.0]])
    assert np.array_equal(render_reference(prims, cam).array, np.zeros((48, 48, 3)))
    assert np.array_equal(render_tiled(prims, cam).array, np.zeros((48, 48, 3)))


def test_splat_records_invariants():
    prims = random_primitives(100, 8)
    cam = simple_camera(64, 64, 90.0)
    records = splat_records(prims, cam)
    assert records, "scene should produce visible splats"
    for rec in records[:20]:
        assert rec.depth > 0.0
        assert rec.radius >= 1.0
        assert np.allclose(rec.cov2d, rec.cov2d.T)


def test_threaded_render_matches_single():
    prims = random_primitives(250, 10)
    cam = simple_camera(96, 96, 100.0)
    one = render_tiled(prims, cam, threads=1).array
    four = render_tiled(prims, cam, threads=4).array
    assert np.array_equal(one, four)


def test_png_write_read_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    img = ImageBuffer(rng.uniform(size=(20, 30, 3)))
    path = tmp_path / "img.png"
    write_png(path, img)
    back = read_png(path)
    assert back.array.shape == (20, 30, 3)
    assert np.array_equal(to_uint8(back), to_uint8(img))


def test_png_round_half_up():
    # 0.5/255 quantizes up to 1, just below stays at 0
    img = ImageBuffer(np.array([[[0.5 / 255.0, 0.4999 / 255.0, 0.0]]]))
    assert np.array_equal(to_uint8(img)[0, 0], [1, 0, 0])


def test_profile_report_shape():
    prims = random_primitives(200, 13)
    cam = simple_camera(64, 64, 90.0)
    rep = profile_render(prims, cam, repeats=2)
    assert set(rep.stages) == {"binning", "sorting", "compositing"}
    for t in rep.stages.values():
        assert t.min_seconds <= t.mean_seconds
    d = rep.to_dict()
    assert d["repeats"] == 2 and d["gaussians"] == 200
    with pytest.raises(ValueError):
        profile_render(prims, cam, repeats=0)


def test_profile_zero_gaussians_is_well_formed():
    prims = GaussianPrimitives(np.zeros((0, 3)), np.zeros((0, 4)), np.ones((0, 3)),
                               np.zeros(0), np.zeros((0, 3)))
    rep = profile_render(prims, simple_camera(), repeats=1)
    assert rep.total.mean_seconds >= 0.0
    assert rep.gaussian_count == 0


def test_tiled_faster_than_reference_midsize():
    """Tile binning plus early exit beats brute force on a dense scene."""
    import time

    from _scenes import shell_primitives

    prims = shell_primitives(2000, 0)
    cam = Camera(width=512, height=288, fx=560.0, fy=560.0, cx=256.0, cy=144.0)
    render_tiled(prims, cam)  # warm
    t0 = time.perf_counter()
    render_tiled(prims, cam)
    t_tiled = time.perf_counter() - t0
    t0 = time.perf_counter()
    render_reference(prims, cam)
    t_ref = time.perf_counter() - t0
    assert t_tiled < t_ref
