"""JIT-compiled compositing kernels shared by both renderers.

One scalar alpha evaluation serves the reference renderer, the tiled
renderer, and the backward pass, so a pixel sees bitwise-identical alphas
on every code path.  The alpha_min skip is applied through its level set:
alpha >= alpha_min  <=>  quad <= qcut  with  qcut = 2*ln(opacity/alpha_min),
which avoids the exp for pixels that cannot contribute.

Kernels are nopython, single-threaded, IEEE-strict (no fastmath), and
release the GIL so callers may run disjoint tiles on a thread pool.
"""

from __future__ import annotations

import numpy as np
from numba import njit

ALPHA_MIN = 1.0 / 255.0
ALPHA_CLAMP = 1.0 - 1e-12


@njit(cache=True, nogil=True)
def _window_rows(center, radius, origin, count):
    """Pixel-index range of |pixel_center - center| <= radius, clipped to the window."""
    lo_f = np.floor(center - radius - origin - 0.5) - 1.0
    hi_f = np.ceil(center + radius - origin - 0.5) + 1.0
    lo = 0 if lo_f < 0.0 else int(lo_f)
    hi = count - 1 if hi_f > count - 1.0 else int(hi_f)
    return lo, hi


@njit(cache=True, nogil=True)
def composite_range(ids, mean2d, inv_cov, opacities, qcut, colors, radius,
                    x0, y0, color_acc, trans, t_min, use_early_exit):
    """Composite splats `ids` (front-to-back order) into a pixel window.

    color_acc (h, w, 3) and trans (h, w) are updated in place; the window's
    top-left pixel is (row y0, col x0).  Returns the number of splats
    consumed (early exit stops once every pixel's transmittance < t_min).
    """
    h, w = trans.shape
    for s in range(ids.shape[0]):
        i = ids[s]
        ia = inv_cov[i, 0]
        ib = inv_cov[i, 1]
        ic = inv_cov[i, 2]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        o = opacities[i]
        qc = qcut[i]
        cr = colors[i, 0]
        cg = colors[i, 1]
        cb = colors[i, 2]
        rlo, rhi = _window_rows(my, radius[i], float(y0), h)
        clo, chi = _window_rows(mx, radius[i], float(x0), w)
        for r in range(rlo, rhi + 1):
            dy = (y0 + r) + 0.5 - my
            for c in range(clo, chi + 1):
                dx = (x0 + c) + 0.5 - mx
                quad = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if quad > qc:
                    continue
                alpha = o * np.exp(-0.5 * quad)
                if alpha > ALPHA_CLAMP:
                    alpha = ALPHA_CLAMP
                t_old = trans[r, c]
                weight = alpha * t_old
                color_acc[r, c, 0] += weight * cr
                color_acc[r, c, 1] += weight * cg
                color_acc[r, c, 2] += weight * cb
                trans[r, c] = t_old * (1.0 - alpha)
        if use_early_exit:
            t_max = 0.0
            for r in range(h):
                for c in range(w):
                    if trans[r, c] > t_max:
                        t_max = trans[r, c]
            if t_max < t_min:
                return s + 1
    return ids.shape[0]


@njit(cache=True, nogil=True)
def backward_tile(ids, n_used, mean2d, inv_cov, opacities, qcut, colors, radius,
                  x0, y0, upstream, u_dot_final,
                  out_dm, out_dinv, out_do, out_dc):
    """Replay one tile front-to-back and accumulate per-splat gradients.

    `u_dot_final` is sum_c upstream * final_color (background included) for
    this tile; suffix mass behind each splat is peeled off it progressively.
    Outputs are per-splat rows aligned with ids[:n_used].
    """
    h, w = u_dot_final.shape
    trans = np.ones((h, w))
    u_run = np.zeros((h, w))
    for s in range(n_used):
        i = ids[s]
        ia = inv_cov[i, 0]
        ib = inv_cov[i, 1]
        ic = inv_cov[i, 2]
        mx = mean2d[i, 0]
        my = mean2d[i, 1]
        o = opacities[i]
        qc = qcut[i]
        cr = colors[i, 0]
        cg = colors[i, 1]
        cb = colors[i, 2]
        dmx = 0.0
        dmy = 0.0
        dia = 0.0
        dib = 0.0
        dic = 0.0
        d_o = 0.0
        dcr = 0.0
        dcg = 0.0
        dcb = 0.0
        rlo, rhi = _window_rows(my, radius[i], float(y0), h)
        clo, chi = _window_rows(mx, radius[i], float(x0), w)
        for r in range(rlo, rhi + 1):
            dy = (y0 + r) + 0.5 - my
            for c in range(clo, chi + 1):
                dx = (x0 + c) + 0.5 - mx
                quad = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
                if quad > qc:
                    continue
                g = np.exp(-0.5 * quad)
                a_raw = o * g
                alpha = a_raw if a_raw <= ALPHA_CLAMP else ALPHA_CLAMP
                t_old = trans[r, c]
                weight = alpha * t_old
                ur = upstream[r, c, 0]
                ug = upstream[r, c, 1]
                ub = upstream[r, c, 2]
                u_col = ur * cr + ug * cg + ub * cb
                u_run[r, c] += weight * u_col
                u_suffix = u_dot_final[r, c] - u_run[r, c]
                d_alpha = u_col * t_old - u_suffix / (1.0 - alpha)
                dcr += weight * ur
                dcg += weight * ug
                dcb += weight * ub
                if a_raw <= ALPHA_CLAMP:
                    d_o += d_alpha * g
                    dq = d_alpha * o * (-0.5) * g
                    dia += dq * dx * dx
                    dib += dq * 2.0 * dx * dy
                    dic += dq * dy * dy
                    dmx -= dq * 2.0 * (ia * dx + ib * dy)
                    dmy -= dq * 2.0 * (ib * dx + ic * dy)
                trans[r, c] = t_old * (1.0 - alpha)
        out_dm[s, 0] = dmx
        out_dm[s, 1] = dmy
        out_dinv[s, 0] = dia
        out_dinv[s, 1] = dib
        out_dinv[s, 2] = dic
        out_do[s] = d_o
        out_dc[s, 0] = dcr
        out_dc[s, 1] = dcg
        out_dc[s, 2] = dcb
