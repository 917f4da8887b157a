"""Objective terms for avatar fitting, each with analytic gradients.

The weighted objective is

    total = w1*L1 + w2*(1 - SSIM) + w3*L_geo + w4*L_perc
          + w5*L_temp + w6*L_lmk + w7*L_reg

with defaults (0.8, 0.2, 0.1, 0.01, 0.1, 0.8, 0.1).  The perceptual term
requires a pretrained network and is out of scope here: it is always
reported as 0, so its weight contributes nothing.

L1 subgradients use the sign convention with 0 at exact ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .images import ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0


def _as_array(img) -> np.ndarray:
    if isinstance(img, ImageBuffer):
        return img.array
    return np.asarray(img, dtype=np.float64)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# photometric terms

def l1_loss(rendered, target) -> float:
    a, b = _as_array(rendered), _as_array(target)
    _check_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_loss_grad(rendered, target) -> np.ndarray:
    a, b = _as_array(rendered), _as_array(target)
    _check_pair(a, b)
    return np.sign(a - b) / a.size


def _ssim_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _window_mean(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Windowed means over full (valid) windows only; channels untouched."""
    half = len(kernel) // 2
    out = correlate1d(img, kernel, axis=0, mode="constant")
    out = correlate1d(out, kernel, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _ssim_maps(a: np.ndarray, b: np.ndarray):
    kernel = _ssim_kernel()
    mu_a = _window_mean(a, kernel)
    mu_b = _window_mean(b, kernel)
    var_a = _window_mean(a * a, kernel) - mu_a * mu_a
    var_b = _window_mean(b * b, kernel) - mu_b * mu_b
    cov = _window_mean(a * b, kernel) - mu_a * mu_b
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    a1 = 2.0 * mu_a * mu_b + c1
    a2 = 2.0 * cov + c2
    b1 = mu_a * mu_a + mu_b * mu_b + c1
    b2 = var_a + var_b + c2
    return mu_a, mu_b, a1, a2, b1, b2


def ssim(rendered, target) -> float:
    """Mean single-scale SSIM (11x11 Gaussian window, sigma 1.5) on [0, 1] images."""
    a, b = _as_array(rendered), _as_array(target)
    _check_pair(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    _, _, a1, a2, b1, b2 = _ssim_maps(a, b)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(rendered, target) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient w.r.t. `rendered`, sharing one stats pass."""
    a, b = _as_array(rendered), _as_array(target)
    _check_pair(a, b)
    maps = _ssim_maps(a, b)
    value = float(np.mean(maps[2] * maps[3] / (maps[4] * maps[5])))
    return value, _ssim_grad_from_maps(a, b, maps)


def ssim_grad(rendered, target) -> np.ndarray:
    """d(mean SSIM)/d(rendered), same shape as the rendered image."""
    a, b = _as_array(rendered), _as_array(target)
    _check_pair(a, b)
    return _ssim_grad_from_maps(a, b, _ssim_maps(a, b))


def _ssim_grad_from_maps(a: np.ndarray, b: np.ndarray, maps) -> np.ndarray:
    mu_a, mu_b, a1, a2, b1, b2 = maps
    denom = b1 * b2
    # partials of the per-window SSIM w.r.t. (mean, variance, covariance)
    # stats, arranged so the gradient is exactly zero for identical images
    # (a1/b1 and a2/b2 are exactly 1 there)
    coef_const = (2.0 * a2 / denom) * (mu_b - mu_a * (a1 / b1))
    coef_b = 2.0 * a1 / denom                  # multiplies (b_i - mu_b)
    coef_a = -coef_b * (a2 / b2)               # multiplies (a_i - mu_a)

    half = SSIM_WINDOW // 2
    kernel = _ssim_kernel()

    def spread(m: np.ndarray) -> np.ndarray:
        full = np.zeros_like(a)
        full[half:-half, half:-half] = m
        out = correlate1d(full, kernel, axis=0, mode="constant")
        return correlate1d(out, kernel, axis=1, mode="constant")

    n_windows = a1.size
    grad = (
        spread(coef_const - coef_b * mu_b - coef_a * mu_a)
        + b * spread(coef_b)
        + a * spread(coef_a)
    )
    return grad / n_windows


def psnr(rendered, target) -> float:
    """Peak signal-to-noise ratio in dB on [0, 1] images, capped at PSNR_CAP."""
    a, b = _as_array(rendered), _as_array(target)
    _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(float(-10.0 * np.log10(mse)), PSNR_CAP)


# ---------------------------------------------------------------------------
# geometric / regularization terms

def geo_loss(deformed_vertices: np.ndarray, tracked_vertices: np.ndarray) -> float:
    """Mean squared vertex deviation from the tracked mesh (soft shape prior)."""
    a = np.asarray(deformed_vertices, dtype=np.float64)
    b = np.asarray(tracked_vertices, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vertex sets must have equal cardinality")
    return float(np.sum((a - b) ** 2) / len(a))


def geo_loss_grad(deformed_vertices: np.ndarray, tracked_vertices: np.ndarray) -> np.ndarray:
    a = np.asarray(deformed_vertices, dtype=np.float64)
    b = np.asarray(tracked_vertices, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("vertex sets must have equal cardinality")
    return 2.0 * (a - b) / len(a)


def reg_loss(primitives, delta_pos: np.ndarray, delta_rot: np.ndarray) -> float:
    """Mean L1 penalty on activated scales and raw position/rotation deltas."""
    s = np.asarray(primitives.scales, dtype=np.float64)
    dp = np.asarray(delta_pos, dtype=np.float64)
    dr = np.asarray(delta_rot, dtype=np.float64)
    n = len(s)
    return float((np.abs(s).sum() + np.abs(dp).sum() + np.abs(dr).sum()) / n)


def reg_loss_grads(primitives, delta_pos: np.ndarray, delta_rot: np.ndarray):
    """Gradients w.r.t. (activated scales, delta_pos, delta_rot)."""
    s = np.asarray(primitives.scales, dtype=np.float64)
    n = len(s)
    return np.sign(s) / n, np.sign(delta_pos) / n, np.sign(delta_rot) / n


def lmk_loss(posed_landmarks: np.ndarray, reference_landmarks: np.ndarray) -> float:
    """Mean L1 distance between posed and reference rigid landmarks."""
    a = np.asarray(posed_landmarks, dtype=np.float64)
    b = np.asarray(reference_landmarks, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("landmark sets must have equal cardinality")
    return float(np.sum(np.abs(a - b)) / len(a))


def lmk_loss_grad(posed_landmarks: np.ndarray, reference_landmarks: np.ndarray) -> np.ndarray:
    a = np.asarray(posed_landmarks, dtype=np.float64)
    b = np.asarray(reference_landmarks, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("landmark sets must have equal cardinality")
    return np.sign(a - b) / len(a)


def temp_loss(deltas_now, deltas_prev) -> float:
    """Mean L1 change of the per-gaussian deltas between consecutive frames."""
    n = len(deltas_now.delta_pos)
    if (
        deltas_prev.delta_pos.shape != deltas_now.delta_pos.shape
        or deltas_prev.delta_rot.shape != deltas_now.delta_rot.shape
        or deltas_prev.delta_scale.shape != deltas_now.delta_scale.shape
    ):
        raise ValueError("delta grids must have equal cardinality")
    total = (
        np.abs(deltas_now.delta_pos - deltas_prev.delta_pos).sum()
        + np.abs(deltas_now.delta_scale - deltas_prev.delta_scale).sum()
        + np.abs(deltas_now.delta_rot - deltas_prev.delta_rot).sum()
    )
    return float(total / n)


def temp_loss_grads(deltas_now, deltas_prev):
    """Gradients w.r.t. the current frame's (delta_pos, delta_rot, delta_scale)."""
    n = len(deltas_now.delta_pos)
    return (
        np.sign(deltas_now.delta_pos - deltas_prev.delta_pos) / n,
        np.sign(deltas_now.delta_rot - deltas_prev.delta_rot) / n,
        np.sign(deltas_now.delta_scale - deltas_prev.delta_scale) / n,
    )


# ---------------------------------------------------------------------------
# weighted objective

@dataclass(frozen=True)
class LossWeights:
    l1: float = 0.8
    ssim: float = 0.2
    geo: float = 0.1
    perc: float = 0.01
    temp: float = 0.1
    lmk: float = 0.8
    reg: float = 0.1

    def __post_init__(self):
        for name in ("l1", "ssim", "geo", "perc", "temp", "lmk", "reg"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class LossReport:
    """Per-term values (ssim stored as the similarity itself) and the weighted total."""

    l1: float = 0.0
    ssim: float = 1.0
    geo: float = 0.0
    perc: float = 0.0
    temp: float = 0.0
    lmk: float = 0.0
    reg: float = 0.0
    total: float = 0.0

    def terms(self) -> dict[str, float]:
        """Terms exactly as they enter the weighted sum."""
        return {
            "l1": self.l1,
            "ssim": 1.0 - self.ssim,
            "geo": self.geo,
            "perc": self.perc,
            "temp": self.temp,
            "lmk": self.lmk,
            "reg": self.reg,
        }


def total_objective(
    rendered,
    target,
    weights: LossWeights = LossWeights(),
    deformed_vertices=None,
    tracked_vertices=None,
    posed_landmarks=None,
    reference_landmarks=None,
    primitives=None,
    deltas=None,
    prev_deltas=None,
) -> LossReport:
    """Evaluate the weighted objective; optional terms default to 0.

    `rendered`/`target` may be single images or equal-length lists, in which
    case the photometric terms are averaged over the pairs.
    """
    rendered_list = rendered if isinstance(rendered, (list, tuple)) else [rendered]
    target_list = target if isinstance(target, (list, tuple)) else [target]
    if len(rendered_list) != len(target_list):
        raise ValueError("rendered/target lists must pair up")

    l1_val = float(np.mean([l1_loss(r, t) for r, t in zip(rendered_list, target_list)]))
    ssim_val = float(np.mean([ssim(r, t) for r, t in zip(rendered_list, target_list)]))
    geo_val = (
        geo_loss(deformed_vertices, tracked_vertices)
        if deformed_vertices is not None and tracked_vertices is not None
        else 0.0
    )
    lmk_val = (
        lmk_loss(posed_landmarks, reference_landmarks)
        if posed_landmarks is not None and reference_landmarks is not None
        else 0.0
    )
    reg_val = reg_loss(primitives, deltas.delta_pos, deltas.delta_rot) if primitives is not None and deltas is not None else 0.0
    temp_val = temp_loss(deltas, prev_deltas) if deltas is not None and prev_deltas is not None else 0.0

    total = (
        weights.l1 * l1_val
        + weights.ssim * (1.0 - ssim_val)
        + weights.geo * geo_val
        + weights.perc * 0.0
        + weights.temp * temp_val
        + weights.lmk * lmk_val
        + weights.reg * reg_val
    )
    return LossReport(
        l1=l1_val, ssim=ssim_val, geo=geo_val, perc=0.0,
        temp=temp_val, lmk=lmk_val, reg=reg_val, total=total,
    )
