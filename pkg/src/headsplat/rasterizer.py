"""Forward image formation and analytic gradients for Gaussian splatting.

Two forward paths share one compiled per-pixel kernel, so a pixel sees
bitwise-identical alphas on either path:

* render_reference: every splat is evaluated at every pixel (the only
  cutoff is the shared alpha_min skip) in a single global depth order.
  Slow, simple, and the correctness oracle.
* render_tiled: splats are binned to the tiles their footprint overlaps,
  depth-sorted within each tile, and composited front-to-back with early
  termination once tile transmittance drops below t_min.

Depth is the view-space z of the splat mean; equal depths tie-break by
gaussian index so rendering is invariant to input permutation.  The tiled
footprint radius bounds the alpha_min level set of the splat (never below
3 sigma), so binning never drops a pixel the skip rule would keep; the
reference path uses unbounded windows and does not depend on that bound.

render_backward replays the forward state per tile (or reuses it from a
matching forward render) and produces exact partials of
sum(upstream * image) w.r.t. raw per-gaussian parameters (position;
quaternion through normalization; scale, opacity, color through their
activations).  Culled gaussians get zero gradient.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._kernels import ALPHA_CLAMP, ALPHA_MIN, backward_tile, composite_range
from .camera import Camera, DILATION_DEFAULT, NEAR_EPS
from .cloud import GaussianPrimitives, softplus_grad_from_value
from .images import ImageBuffer
from .rotations import build_covariance, build_covariance_backward

T_MIN = 1e-4                 # tile early-termination threshold on transmittance
TILE_SIZE_DEFAULT = 16
# footprint never below 3 sigma; the alpha_min level set takes over for opaque splats
_K2_FLOOR = 9.0


@dataclass
class GradientSet:
    """Per-gaussian partials of a scalar loss w.r.t. raw splat parameters."""

    d_position: np.ndarray     # (N, 3)
    d_rotation: np.ndarray     # (N, 4) w.r.t. the stored quaternion (through normalization)
    d_scale_raw: np.ndarray    # (N, 3) w.r.t. inverse-softplus of the stored scales
    d_opacity_raw: np.ndarray  # (N,)  w.r.t. logit of the stored opacities
    d_color_raw: np.ndarray    # (N, 3) w.r.t. logit of the stored colors

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(
            d_position=np.zeros((n, 3)),
            d_rotation=np.zeros((n, 4)),
            d_scale_raw=np.zeros((n, 3)),
            d_opacity_raw=np.zeros(n),
            d_color_raw=np.zeros((n, 3)),
        )

    def add(self, other: "GradientSet") -> None:
        self.d_position += other.d_position
        self.d_rotation += other.d_rotation
        self.d_scale_raw += other.d_scale_raw
        self.d_opacity_raw += other.d_opacity_raw
        self.d_color_raw += other.d_color_raw

    def scale(self, factor: float) -> None:
        self.d_position *= factor
        self.d_rotation *= factor
        self.d_scale_raw *= factor
        self.d_opacity_raw *= factor
        self.d_color_raw *= factor


@dataclass(frozen=True)
class SplatRecord:
    """Screen-space footprint of one projected gaussian."""

    index: int
    mean2d: np.ndarray    # (2,) pixels
    cov2d: np.ndarray     # (2, 2) pixels^2, dilated
    depth: float          # view-space z, meters
    radius: float         # footprint radius, pixels


@dataclass
class ProjectedSplats:
    """Batch projection output; `order` lists valid splats by (depth, index)."""

    mean_cam: np.ndarray   # (N, 3)
    mean2d: np.ndarray     # (N, 2)
    cov2d: np.ndarray      # (N, 3) packed (a, b, c) of [[a, b], [b, c]]
    inv_cov2d: np.ndarray  # (N, 3) packed inverse
    depth: np.ndarray      # (N,)
    radius: np.ndarray     # (N,)
    qcut: np.ndarray       # (N,) quad level where alpha crosses alpha_min
    jac: np.ndarray        # (N, 2, 3)
    m_proj: np.ndarray     # (N, 2, 3) J @ W
    valid: np.ndarray      # (N,) bool
    order: np.ndarray      # (N_valid,) indices sorted by (depth, index)


def project_splats(prims: GaussianPrimitives, cam: Camera,
                   dilation: float = DILATION_DEFAULT) -> ProjectedSplats:
    n = len(prims)
    mean_cam = prims.positions @ cam.rotation.T + cam.translation
    depth = mean_cam[:, 2].copy()
    valid = depth > NEAR_EPS
    # splats this faint never pass the alpha_min skip at any pixel
    valid &= prims.opacities >= ALPHA_MIN

    mean2d = np.zeros((n, 2))
    jac = np.zeros((n, 2, 3))
    m_proj = np.zeros((n, 2, 3))
    cov2d = np.zeros((n, 3))
    inv_cov2d = np.zeros((n, 3))
    radius = np.zeros(n)
    qcut = np.full(n, -1.0)

    if np.any(valid):
        x, y, z = mean_cam[valid, 0], mean_cam[valid, 1], mean_cam[valid, 2]
        mean2d[valid, 0] = cam.fx * x / z + cam.cx
        mean2d[valid, 1] = cam.fy * y / z + cam.cy

        jv = np.zeros((int(valid.sum()), 2, 3))
        jv[:, 0, 0] = cam.fx / z
        jv[:, 0, 2] = -cam.fx * x / (z * z)
        jv[:, 1, 1] = cam.fy / z
        jv[:, 1, 2] = -cam.fy * y / (z * z)
        jac[valid] = jv

        mv = jv @ cam.rotation
        m_proj[valid] = mv
        cov3 = build_covariance(prims.rotations[valid], prims.scales[valid])
        c2 = mv @ cov3 @ np.swapaxes(mv, -1, -2)
        a = c2[:, 0, 0] + dilation
        b = c2[:, 0, 1]
        c = c2[:, 1, 1] + dilation
        cov2d[valid, 0], cov2d[valid, 1], cov2d[valid, 2] = a, b, c

        det = a * c - b * b
        inv_cov2d[valid, 0] = c / det
        inv_cov2d[valid, 1] = -b / det
        inv_cov2d[valid, 2] = a / det

        qc = 2.0 * np.log(255.0 * prims.opacities[valid])
        qcut[valid] = qc
        lam_max = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
        radius[valid] = np.maximum(np.sqrt(lam_max * np.maximum(qc, _K2_FLOOR)) + 0.5, 1.0)

    vidx = np.flatnonzero(valid)
    order = vidx[np.lexsort((vidx, depth[vidx]))]
    return ProjectedSplats(
        mean_cam=mean_cam, mean2d=mean2d, cov2d=cov2d, inv_cov2d=inv_cov2d,
        depth=depth, radius=radius, qcut=qcut, jac=jac, m_proj=m_proj,
        valid=valid, order=order,
    )


def splat_records(prims: GaussianPrimitives, cam: Camera,
                  dilation: float = DILATION_DEFAULT) -> list[SplatRecord]:
    proj = project_splats(prims, cam, dilation)
    out = []
    for i in np.flatnonzero(proj.valid):
        a, b, c = proj.cov2d[i]
        out.append(SplatRecord(
            index=int(i),
            mean2d=proj.mean2d[i].copy(),
            cov2d=np.array([[a, b], [b, c]]),
            depth=float(proj.depth[i]),
            radius=float(proj.radius[i]),
        ))
    return out


def _finalize(color_acc: np.ndarray, trans: np.ndarray, channels: int,
              background) -> ImageBuffer:
    if background is not None:
        bg = np.asarray(background, dtype=np.float64).reshape(3)
        color_acc = color_acc + bg[None, None, :] * trans[:, :, None]
    if channels == 4:
        out = np.concatenate([color_acc, (1.0 - trans)[:, :, None]], axis=2)
    else:
        out = color_acc
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def render_reference(prims: GaussianPrimitives, cam: Camera, channels: int = 3,
                     background=None, dilation: float = DILATION_DEFAULT) -> ImageBuffer:
    """Brute-force per-pixel oracle: all splats, all pixels, one global depth sort."""
    if channels not in (3, 4):
        raise ValueError("channels must be 3 or 4")
    color_acc = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))
    proj = project_splats(prims, cam, dilation)
    # unbounded windows: the oracle must not depend on the tiled footprint bound
    no_bound = np.full(len(prims), np.inf)
    composite_range(proj.order, proj.mean2d, proj.inv_cov2d, prims.opacities,
                    proj.qcut, prims.colors, no_bound, 0, 0, color_acc, trans, 0.0, False)
    return _finalize(color_acc, trans, channels, background)


@dataclass
class _TileTask:
    r0: int
    r1: int
    c0: int
    c1: int
    splats: np.ndarray  # indices, already in (depth, index) order


def _bin_splats(proj: ProjectedSplats, width: int, height: int,
                tile_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(tile_id, gaussian_index) pairs for every tile a footprint overlaps."""
    idx = np.flatnonzero(proj.valid)
    if idx.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    mx, my = proj.mean2d[idx, 0], proj.mean2d[idx, 1]
    r = proj.radius[idx]
    c0 = np.floor(mx - r).astype(np.int64) - 1
    c1 = np.ceil(mx + r).astype(np.int64) + 1
    r0 = np.floor(my - r).astype(np.int64) - 1
    r1 = np.ceil(my + r).astype(np.int64) + 1
    on_screen = (c1 >= 0) & (c0 <= width - 1) & (r1 >= 0) & (r0 <= height - 1)
    idx, c0, c1, r0, r1 = idx[on_screen], c0[on_screen], c1[on_screen], r0[on_screen], r1[on_screen]
    if idx.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)

    ntx = (width + tile_size - 1) // tile_size
    nty = (height + tile_size - 1) // tile_size
    tx0 = np.clip(c0 // tile_size, 0, ntx - 1)
    tx1 = np.clip(c1 // tile_size, 0, ntx - 1)
    ty0 = np.clip(r0 // tile_size, 0, nty - 1)
    ty1 = np.clip(r1 // tile_size, 0, nty - 1)

    wspan = tx1 - tx0 + 1
    hspan = ty1 - ty0 + 1
    counts = wspan * hspan
    total = int(counts.sum())
    rep = np.repeat(np.arange(idx.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    ordinal = np.arange(total) - starts[rep]
    dxt = ordinal % wspan[rep]
    dyt = ordinal // wspan[rep]
    tile_ids = (ty0[rep] + dyt) * ntx + (tx0[rep] + dxt)
    return tile_ids, idx[rep]


def _make_tile_tasks(proj: ProjectedSplats, width: int, height: int,
                     tile_size: int) -> list[_TileTask]:
    tile_ids, gidx = _bin_splats(proj, width, height, tile_size)
    return _sort_and_segment(proj, tile_ids, gidx, width, height, tile_size)


def _sort_and_segment(proj: ProjectedSplats, tile_ids: np.ndarray, gidx: np.ndarray,
                      width: int, height: int, tile_size: int) -> list[_TileTask]:
    if tile_ids.size == 0:
        return []
    order = np.lexsort((gidx, proj.depth[gidx], tile_ids))
    tile_sorted = tile_ids[order]
    gidx_sorted = gidx[order]
    uniq, seg_starts = np.unique(tile_sorted, return_index=True)
    seg_ends = np.append(seg_starts[1:], tile_sorted.size)
    ntx = (width + tile_size - 1) // tile_size
    tasks = []
    for t, s0, s1 in zip(uniq, seg_starts, seg_ends):
        ty, tx = divmod(int(t), ntx)
        tasks.append(_TileTask(
            r0=ty * tile_size, r1=min((ty + 1) * tile_size, height),
            c0=tx * tile_size, c1=min((tx + 1) * tile_size, width),
            splats=np.ascontiguousarray(gidx_sorted[s0:s1]),
        ))
    return tasks


@dataclass
class RenderState:
    """Forward-pass state a backward pass can reuse (same scene and settings)."""

    proj: ProjectedSplats
    tasks: list[_TileTask]
    n_used: list[int]          # early-termination stop index per task
    color_pre: np.ndarray      # (H, W, 3) composited color before background/clip
    trans: np.ndarray          # (H, W) final transmittance
    tile_size: int
    t_min: float


def render_tiled(prims: GaussianPrimitives, cam: Camera, tile_size: int = TILE_SIZE_DEFAULT,
                 channels: int = 3, background=None, threads: int = 1,
                 dilation: float = DILATION_DEFAULT, t_min: float = T_MIN,
                 return_state: bool = False, _timings: dict | None = None):
    if channels not in (3, 4):
        raise ValueError("channels must be 3 or 4")
    if tile_size < 1:
        raise ValueError("tile_size must be >= 1")
    color_acc = np.zeros((cam.height, cam.width, 3))
    trans = np.ones((cam.height, cam.width))

    t0 = time.perf_counter()
    proj = project_splats(prims, cam, dilation)
    tile_ids, gidx = _bin_splats(proj, cam.width, cam.height, tile_size)
    t1 = time.perf_counter()
    tasks = _sort_and_segment(proj, tile_ids, gidx, cam.width, cam.height, tile_size)
    t2 = time.perf_counter()

    n_used = [0] * len(tasks)

    def run_tile(k: int) -> None:
        task = tasks[k]
        n_used[k] = composite_range(
            task.splats, proj.mean2d, proj.inv_cov2d, prims.opacities,
            proj.qcut, prims.colors, proj.radius, task.c0, task.r0,
            color_acc[task.r0:task.r1, task.c0:task.c1],
            trans[task.r0:task.r1, task.c0:task.c1], t_min, True)

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, range(len(tasks))))
    else:
        for k in range(len(tasks)):
            run_tile(k)
    t3 = time.perf_counter()

    if _timings is not None:
        _timings.setdefault("binning", []).append(t1 - t0)
        _timings.setdefault("sorting", []).append(t2 - t1)
        _timings.setdefault("compositing", []).append(t3 - t2)
    img = _finalize(color_acc, trans, channels, background)
    if return_state:
        return img, RenderState(proj=proj, tasks=tasks, n_used=n_used,
                                color_pre=color_acc, trans=trans,
                                tile_size=tile_size, t_min=t_min)
    return img


def render_backward(prims: GaussianPrimitives, cam: Camera, upstream,
                    tile_size: int = TILE_SIZE_DEFAULT, background=None,
                    threads: int = 1, dilation: float = DILATION_DEFAULT,
                    t_min: float = T_MIN, state: RenderState | None = None) -> GradientSet:
    """Exact analytic partials of sum(upstream * rendered RGB) w.r.t. raw params.

    `upstream` is an (H, W, 3) array (or 3-channel ImageBuffer) of loss
    gradients w.r.t. the rendered image.  Without a `state` from the
    matching forward render, the forward pass is recomputed tile by tile
    with the same kernels and early-termination rule.
    """
    if isinstance(upstream, ImageBuffer):
        upstream = upstream.array
    upstream = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64))
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError("upstream gradient must be (H, W, 3)")

    n = len(prims)
    if state is not None:
        proj, tasks, t_min = state.proj, state.tasks, state.t_min
    else:
        proj = project_splats(prims, cam, dilation)
        tasks = _make_tile_tasks(proj, cam.width, cam.height, tile_size)
    bg = None if background is None else np.asarray(background, dtype=np.float64).reshape(3)

    d_mean2d = np.zeros((n, 2))
    d_inv = np.zeros((n, 3))      # packed (ia, ib, ic) gradients
    d_opacity = np.zeros(n)
    d_color = np.zeros((n, 3))

    def run_tile(k: int):
        task = tasks[k]
        h, w = task.r1 - task.r0, task.c1 - task.c0
        if state is not None:
            c_final = state.color_pre[task.r0:task.r1, task.c0:task.c1].copy()
            t_tile = state.trans[task.r0:task.r1, task.c0:task.c1]
            n_used = state.n_used[k]
        else:
            c_final = np.zeros((h, w, 3))
            t_tile = np.ones((h, w))
            n_used = composite_range(task.splats, proj.mean2d, proj.inv_cov2d,
                                     prims.opacities, proj.qcut, prims.colors, proj.radius,
                                     task.c0, task.r0, c_final, t_tile, t_min, True)
        if bg is not None:
            c_final += bg[None, None, :] * t_tile[:, :, None]
        u_tile = upstream[task.r0:task.r1, task.c0:task.c1]
        u_dot_final = np.ascontiguousarray(np.einsum("hwc,hwc->hw", u_tile, c_final))

        loc_idx = task.splats[:n_used]
        loc_dm = np.zeros((n_used, 2))
        loc_dinv = np.zeros((n_used, 3))
        loc_do = np.zeros(n_used)
        loc_dc = np.zeros((n_used, 3))
        backward_tile(task.splats, n_used, proj.mean2d, proj.inv_cov2d, prims.opacities,
                      proj.qcut, prims.colors, proj.radius, task.c0, task.r0,
                      np.ascontiguousarray(u_tile), u_dot_final,
                      loc_dm, loc_dinv, loc_do, loc_dc)
        return loc_idx, loc_dm, loc_dinv, loc_do, loc_dc

    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_tile, range(len(tasks))))
    else:
        results = [run_tile(k) for k in range(len(tasks))]

    # fixed reduction order (tile order) keeps results identical at any thread count
    for loc_idx, loc_dm, loc_dinv, loc_do, loc_dc in results:
        np.add.at(d_mean2d, loc_idx, loc_dm)
        np.add.at(d_inv, loc_idx, loc_dinv)
        np.add.at(d_opacity, loc_idx, loc_do)
        np.add.at(d_color, loc_idx, loc_dc)

    return _chain_to_raw(prims, cam, proj, d_mean2d, d_inv, d_opacity, d_color)


def _chain_to_raw(prims: GaussianPrimitives, cam: Camera, proj: ProjectedSplats,
                  d_mean2d: np.ndarray, d_inv: np.ndarray, d_opacity: np.ndarray,
                  d_color: np.ndarray) -> GradientSet:
    """Chain screen-space gradients back through projection and activations."""
    n = len(prims)
    out = GradientSet.zeros(n)
    v = np.flatnonzero(proj.valid)
    if v.size == 0:
        return out

    inv_full = np.empty((v.size, 2, 2))
    inv_full[:, 0, 0] = proj.inv_cov2d[v, 0]
    inv_full[:, 0, 1] = inv_full[:, 1, 0] = proj.inv_cov2d[v, 1]
    inv_full[:, 1, 1] = proj.inv_cov2d[v, 2]

    g_inv = np.empty((v.size, 2, 2))
    g_inv[:, 0, 0] = d_inv[v, 0]
    g_inv[:, 0, 1] = g_inv[:, 1, 0] = 0.5 * d_inv[v, 1]
    g_inv[:, 1, 1] = d_inv[v, 2]
    # d(A^-1)/dA chain: dL/dSigma' = -A^-1 G A^-1 with A^-1 the stored inverse
    g2 = -inv_full @ g_inv @ inv_full

    cov3 = build_covariance(prims.rotations[v], prims.scales[v])
    m = proj.m_proj[v]
    g3 = np.swapaxes(m, -1, -2) @ g2 @ m
    d_m = (g2 + np.swapaxes(g2, -1, -2)) @ m @ cov3
    d_jac = d_m @ cam.rotation.T

    x, y, z = proj.mean_cam[v, 0], proj.mean_cam[v, 1], proj.mean_cam[v, 2]
    fx, fy = cam.fx, cam.fy
    d_cam = np.zeros((v.size, 3))
    d_cam[:, 0] = d_jac[:, 0, 2] * (-fx / (z * z))
    d_cam[:, 1] = d_jac[:, 1, 2] * (-fy / (z * z))
    d_cam[:, 2] = (
        d_jac[:, 0, 0] * (-fx / (z * z))
        + d_jac[:, 1, 1] * (-fy / (z * z))
        + d_jac[:, 0, 2] * (2.0 * fx * x / z**3)
        + d_jac[:, 1, 2] * (2.0 * fy * y / z**3)
    )
    # the screen mean shares the Jacobian of the projection map
    d_cam += np.einsum("nij,ni->nj", proj.jac[v], d_mean2d[v])
    out.d_position[v] = d_cam @ cam.rotation

    d_quat, d_scale = build_covariance_backward(prims.rotations[v], prims.scales[v], g3)
    out.d_rotation[v] = d_quat
    out.d_scale_raw[v] = d_scale * softplus_grad_from_value(prims.scales[v])
    o = prims.opacities[v]
    out.d_opacity_raw[v] = d_opacity[v] * o * (1.0 - o)
    col = prims.colors[v]
    out.d_color_raw[v] = d_color[v] * col * (1.0 - col)
    return out


@dataclass
class StageTiming:
    mean_seconds: float
    min_seconds: float


@dataclass
class ProfileReport:
    """Wall-time breakdown of the tiled renderer's stages."""

    stages: dict[str, StageTiming]
    total: StageTiming
    gaussian_count: int
    width: int
    height: int
    repeats: int
    reference: StageTiming | None = None

    def to_dict(self) -> dict:
        d = {
            "gaussians": self.gaussian_count,
            "width": self.width,
            "height": self.height,
            "repeats": self.repeats,
            "stages": {
                name: {"mean_seconds": t.mean_seconds, "min_seconds": t.min_seconds}
                for name, t in self.stages.items()
            },
            "total": {"mean_seconds": self.total.mean_seconds, "min_seconds": self.total.min_seconds},
        }
        if self.reference is not None:
            d["reference"] = {
                "mean_seconds": self.reference.mean_seconds,
                "min_seconds": self.reference.min_seconds,
            }
        return d


def profile_render(prims: GaussianPrimitives, cam: Camera, repeats: int = 3,
                   tile_size: int = TILE_SIZE_DEFAULT, threads: int = 1,
                   include_reference: bool = False) -> ProfileReport:
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    timings: dict[str, list[float]] = {}
    totals = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        render_tiled(prims, cam, tile_size=tile_size, threads=threads, _timings=timings)
        totals.append(time.perf_counter() - t0)
    stages = {
        name: StageTiming(mean_seconds=float(np.mean(vals)), min_seconds=float(np.min(vals)))
        for name, vals in timings.items()
    }
    reference = None
    if include_reference:
        ref = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            render_reference(prims, cam)
            ref.append(time.perf_counter() - t0)
        reference = StageTiming(mean_seconds=float(np.mean(ref)), min_seconds=float(np.min(ref)))
    return ProfileReport(
        stages=stages,
        total=StageTiming(mean_seconds=float(np.mean(totals)), min_seconds=float(np.min(totals))),
        gaussian_count=len(prims),
        width=cam.width,
        height=cam.height,
        repeats=repeats,
        reference=reference,
    )
