"""Quaternion and covariance algebra for anisotropic 3D Gaussians.

Quaternions are stored scalar-first (w, x, y, z) and normalized lazily at
use sites: every consumer here normalizes before building a matrix, so
callers may hand in raw (un-normalized) 4-vectors.

All functions accept a single item or a leading batch dimension.
"""

from __future__ import annotations

import numpy as np

QUAT_NORM_EPS = 1e-12


def quat_norm(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.sqrt(np.sum(q * q, axis=-1))


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Return q / |q|.  Raises ValueError on (near-)zero norm."""
    q = np.asarray(q, dtype=np.float64)
    n = quat_norm(q)
    if np.any(n < QUAT_NORM_EPS):
        raise ValueError("cannot normalize a zero-norm quaternion")
    return q / n[..., None]


def normalize_quat_backward(q: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. normalize(q) back to q.

    d(q/|q|)/dq = (I - u u^T) / |q| with u = q/|q|.
    """
    q = np.asarray(q, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    n = quat_norm(q)
    if np.any(n < QUAT_NORM_EPS):
        raise ValueError("cannot normalize a zero-norm quaternion")
    u = q / n[..., None]
    proj = upstream - u * np.sum(u * upstream, axis=-1, keepdims=True)
    return proj / n[..., None]


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of the normalized quaternion, shape (..., 3, 3)."""
    u = normalize_quat(q)
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    r = np.empty(u.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def quat_rotation_jacobian(q_unit: np.ndarray) -> np.ndarray:
    """dR/dq of the unit-quaternion rotation formula, shape (..., 4, 3, 3).

    Valid at unit q (the formula's four components treated as free); combine
    with normalize_quat_backward to differentiate through normalization.
    """
    u = np.asarray(q_unit, dtype=np.float64)
    w, x, y, z = u[..., 0], u[..., 1], u[..., 2], u[..., 3]
    zero = np.zeros_like(w)
    jac = np.empty(u.shape[:-1] + (4, 3, 3), dtype=np.float64)
    jac[..., 0, :, :] = 2.0 * np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    jac[..., 1, :, :] = 2.0 * np.stack(
        [
            np.stack([zero, y, z], axis=-1),
            np.stack([y, -2.0 * x, -w], axis=-1),
            np.stack([z, w, -2.0 * x], axis=-1),
        ],
        axis=-2,
    )
    jac[..., 2, :, :] = 2.0 * np.stack(
        [
            np.stack([-2.0 * y, x, w], axis=-1),
            np.stack([x, zero, z], axis=-1),
            np.stack([-w, z, -2.0 * y], axis=-1),
        ],
        axis=-2,
    )
    jac[..., 3, :, :] = 2.0 * np.stack(
        [
            np.stack([-2.0 * z, -w, x], axis=-1),
            np.stack([w, -2.0 * z, y], axis=-1),
            np.stack([x, y, zero], axis=-1),
        ],
        axis=-2,
    )
    return jac


def rotation_backward(q: np.ndarray, d_rotmat: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to the stored quaternion through normalization."""
    u = normalize_quat(q)
    jac = quat_rotation_jacobian(u)
    d_unit = np.einsum("...ab,...mab->...m", d_rotmat, jac)
    return normalize_quat_backward(q, d_unit)


def build_covariance(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """World-space covariance R * diag(s)^2 * R^T, shape (..., 3, 3).

    Positive semi-definite by construction; eigenvalues are the squared
    scales.  Scales must be strictly positive.
    """
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0.0):
        raise ValueError("scales must be strictly positive")
    r = quat_to_rotation(q)
    rs2 = r * (s * s)[..., None, :]
    return rs2 @ np.swapaxes(r, -1, -2)


def build_covariance_backward(
    q: np.ndarray, s: np.ndarray, d_cov: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <d_cov, R diag(s)^2 R^T> w.r.t. (stored q, s)."""
    s = np.asarray(s, dtype=np.float64)
    r = quat_to_rotation(q)
    g_sym = d_cov + np.swapaxes(d_cov, -1, -2)
    # dL/ds_k = 2 s_k (R^T G R)_kk for symmetric G; g_sym already holds G+G^T
    rt_g_r = np.swapaxes(r, -1, -2) @ d_cov @ r
    d_s = 2.0 * s * np.einsum("...kk->...k", rt_g_r)
    d_r = g_sym @ (r * (s * s)[..., None, :])
    d_q = rotation_backward(q, d_r)
    return d_q, d_s


def quat_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion rotating by `angle` radians about `axis`."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < QUAT_NORM_EPS:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * float(angle)
    out = np.empty(4, dtype=np.float64)
    out[0] = np.cos(half)
    out[1:] = np.sin(half) * axis / n
    return out


def rotation_angle_between(qa: np.ndarray, qb: np.ndarray) -> float:
    """Angle in radians of the relative rotation between two quaternions."""
    ua = normalize_quat(qa)
    ub = normalize_quat(qb)
    dot = abs(float(np.dot(ua, ub)))
    return 2.0 * np.arccos(min(dot, 1.0))
