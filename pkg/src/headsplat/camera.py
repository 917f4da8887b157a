"""Pinhole camera model and EWA screen-space projection.

Conventions: right-handed world, camera looks down +z in its own frame,
image y points down.  Pixel (row, col) has its center at (col + 0.5,
row + 0.5) in pixel units.  A point x_world maps to camera space as
x_cam = R @ x_world + t, then to pixels as (fx*x/z + cx, fy*y/z + cy).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Splats with view-space depth at or below this are culled and get zero gradient.
NEAR_EPS = 1e-4
# Screen-space low-pass dilation added to both diagonal entries of the
# projected covariance; keeps it invertible for degenerate splats.
DILATION_DEFAULT = 0.3


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus a rigid world-to-camera transform."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def camera_to_pixels(self, points_cam: np.ndarray) -> np.ndarray:
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        uv = np.empty(p.shape[:-1] + (2,), dtype=np.float64)
        uv[..., 0] = self.fx * p[..., 0] / z + self.cx
        uv[..., 1] = self.fy * p[..., 1] / z + self.cy
        return uv

    def project_points(self, points_world: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and view-space depths of world points."""
        cam = self.world_to_camera(points_world)
        return self.camera_to_pixels(cam), cam[..., 2]


def perspective_jacobian(cam: Camera, mean_cam: np.ndarray) -> np.ndarray:
    """Jacobian of the pixel projection at a camera-space point, shape (..., 2, 3).

    Affine approximation of the perspective map used by EWA splatting:
    [[fx/z, 0, -fx*x/z^2], [0, fy/z, -fy*y/z^2]].  Callers must cull
    points with z <= NEAR_EPS before asking for a Jacobian.
    """
    p = np.asarray(mean_cam, dtype=np.float64)
    if np.any(p[..., 2] <= NEAR_EPS):
        raise ValueError("point is behind the near plane; cull before projecting")
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    jac = np.zeros(p.shape[:-1] + (2, 3), dtype=np.float64)
    jac[..., 0, 0] = cam.fx / z
    jac[..., 0, 2] = -cam.fx * x / (z * z)
    jac[..., 1, 1] = cam.fy / z
    jac[..., 1, 2] = -cam.fy * y / (z * z)
    return jac


def project_covariance(
    cov3: np.ndarray,
    cam: Camera,
    mean_world: np.ndarray,
    dilation: float = DILATION_DEFAULT,
) -> np.ndarray:
    """EWA projection J W Sigma W^T J^T + dilation*I, shape (..., 2, 2)."""
    cov3 = np.asarray(cov3, dtype=np.float64)
    mean_cam = cam.world_to_camera(mean_world)
    jac = perspective_jacobian(cam, mean_cam)
    m = jac @ cam.rotation
    cov2 = m @ cov3 @ np.swapaxes(m, -1, -2)
    cov2[..., 0, 0] += dilation
    cov2[..., 1, 1] += dilation
    return cov2


def gaussian_density_2d(cov2: np.ndarray, d: np.ndarray) -> float:
    """exp(-1/2 d^T cov2^-1 d) for a 2D offset from the splat mean."""
    c = np.asarray(cov2, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    a, b, cc = c[0, 0], c[0, 1], c[1, 1]
    det = a * cc - b * b
    if det <= 0.0:
        raise ValueError("projected covariance must be positive definite")
    quad = (cc * d[0] * d[0] - 2.0 * b * d[0] * d[1] + a * d[1] * d[1]) / det
    return float(np.exp(-0.5 * quad))
