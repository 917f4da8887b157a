"""Camera model and EWA screen-space projection tests."""

import numpy as np
import pytest

from headsplat.camera import (
    Camera,
    DILATION_DEFAULT,
    gaussian_density_2d,
    perspective_jacobian,
    project_covariance,
)
from headsplat.rotations import build_covariance, normalize_quat, quat_to_rotation


def make_camera(**kw):
    args = dict(width=640, height=480, fx=500.0, fy=500.0, cx=320.0, cy=240.0)
    args.update(kw)
    return Camera(**args)


def test_camera_validation():
    with pytest.raises(ValueError):
        make_camera(fx=-1.0)
    with pytest.raises(ValueError):
        make_camera(cx=640.0)
    with pytest.raises(ValueError):
        make_camera(cy=-0.1)


def test_jacobian_on_axis():
    cam = make_camera(fx=100.0, fy=100.0)
    jac = perspective_jacobian(cam, [0.0, 0.0, 1.0])
    assert np.allclose(jac, [[100.0, 0.0, 0.0], [0.0, 100.0, 0.0]])


def test_jacobian_direct_substitution():
    cam = make_camera(fx=100.0, fy=100.0)
    jac = perspective_jacobian(cam, [0.5, 0.0, 2.0])
    assert np.allclose(jac, [[50.0, 0.0, -12.5], [0.0, 50.0, 0.0]])


def test_jacobian_rejects_near_plane():
    cam = make_camera()
    with pytest.raises(ValueError):
        perspective_jacobian(cam, [0.0, 0.0, 0.0])


def test_jacobian_matches_finite_differences():
    """Rows agree with central differences of the exact pixel projection."""
    rng = np.random.default_rng(0)
    for _ in range(100):
        cam = make_camera(fx=rng.uniform(100, 900), fy=rng.uniform(100, 900))
        p = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(0.3, 3.0)])
        jac = perspective_jacobian(cam, p)
        h = 1e-6
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (cam.camera_to_pixels(p + e) - cam.camera_to_pixels(p - e)) / (2.0 * h)
            scale = np.maximum(np.abs(fd), 1e-9)
            assert np.max(np.abs(jac[:, k] - fd) / scale) <= 1e-4


def test_project_zero_covariance_gives_dilation_floor():
    cam = make_camera()
    cov2 = project_covariance(np.zeros((3, 3)), cam, [0.0, 0.0, 1.0])
    assert np.allclose(cov2, DILATION_DEFAULT * np.eye(2))


def test_project_isotropic_on_axis():
    f = 200.0
    cam = make_camera(fx=f, fy=f)
    sigma = 0.01
    cov2 = project_covariance(sigma ** 2 * np.eye(3), cam, [0.0, 0.0, 1.0])
    expected = f * f * sigma * sigma * np.eye(2) + DILATION_DEFAULT * np.eye(2)
    assert np.allclose(cov2, expected, atol=1e-9)


def test_projected_eigenvalues_at_least_dilation():
    rng = np.random.default_rng(1)
    cam = make_camera()
    for _ in range(50):
        cov3 = build_covariance(rng.normal(size=4), rng.uniform(1e-4, 0.05, size=3))
        p = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.4, 2.0)])
        cov2 = project_covariance(cov3, cam, p)
        assert np.allclose(cov2, cov2.T)
        assert np.min(np.linalg.eigvalsh(cov2)) >= DILATION_DEFAULT - 1e-9


def test_projection_is_linear_in_covariance():
    rng = np.random.default_rng(2)
    cam = make_camera()
    p = np.array([0.1, -0.05, 1.2])
    eye2 = DILATION_DEFAULT * np.eye(2)
    for _ in range(20):
        c1 = build_covariance(rng.normal(size=4), rng.uniform(0.001, 0.05, size=3))
        c2 = build_covariance(rng.normal(size=4), rng.uniform(0.001, 0.05, size=3))
        a, b = rng.uniform(0.1, 2.0, size=2)
        lhs = project_covariance(a * c1 + b * c2, cam, p) - eye2
        rhs = a * (project_covariance(c1, cam, p) - eye2) + b * (project_covariance(c2, cam, p) - eye2)
        assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_projection_matches_monte_carlo_covariance():
    """Sample a near-planar gaussian, project exactly, compare 2D covariances."""
    rng = np.random.default_rng(3)
    cam = make_camera(fx=600.0, fy=600.0)
    mean = np.array([0.05, -0.04, 1.0])
    # thin along one axis so the affine approximation is accurate
    rot = quat_to_rotation(normalize_quat(rng.normal(size=4)))
    scales = np.array([0.03, 0.02, 1e-4])
    cov3 = rot @ np.diag(scales ** 2) @ rot.T

    samples = rng.multivariate_normal(mean, cov3, size=100_000)
    pix = cam.camera_to_pixels(cam.world_to_camera(samples))
    empirical = np.cov(pix.T)

    cov2 = project_covariance(cov3, cam, mean) - DILATION_DEFAULT * np.eye(2)
    rel = np.linalg.norm(cov2 - empirical) / np.linalg.norm(empirical)
    assert rel < 0.05


def test_density_examples():
    assert gaussian_density_2d(np.eye(2), [0.0, 0.0]) == pytest.approx(1.0)
    assert gaussian_density_2d(np.eye(2), [1.0, 0.0]) == pytest.approx(np.exp(-0.5))
    assert gaussian_density_2d(np.diag([4.0, 1.0]), [2.0, 1.0]) == pytest.approx(np.exp(-1.0))


def test_density_monotone_along_rays():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=(2, 2))
        cov = a @ a.T + 0.3 * np.eye(2)
        direction = rng.normal(size=2)
        values = [gaussian_density_2d(cov, t * direction) for t in np.linspace(0.0, 5.0, 40)]
        assert all(v1 >= v2 - 1e-15 for v1, v2 in zip(values, values[1:]))


def test_camera_center():
    rot = quat_to_rotation(normalize_quat([0.9, 0.1, -0.2, 0.3]))
    eye = np.array([0.2, -0.1, 0.5])
    cam = make_camera(rotation=rot, translation=-rot @ eye)
    assert np.allclose(cam.center, eye, atol=1e-12)
