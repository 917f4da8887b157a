"""Adam-based per-frame and per-sequence fitting of avatar parameters.

Each iteration renders the avatar for the frame's cameras, evaluates the
weighted objective, backpropagates through the rasterizer and the mesh
pipeline (anchors -> posed vertices -> offsets/pose), and updates eight
parameter groups with per-group learning rates.  Sequences fit frames in
order: frame t warm-starts frame t+1 and provides the deltas the temporal
term penalizes.

Single-threaded runs are bit-deterministic for a fixed seed; multi-threaded
rendering reduces per-tile results in a fixed order so gradients are
identical at any thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera
from .cloud import (AvatarParams, CloudInit, apply_deltas, apply_deltas_backward,
                    initialize_cloud, softplus, softplus_grad_from_value)
from .images import ImageBuffer
from .losses import (LossReport, LossWeights, geo_loss, geo_loss_grad, l1_loss,
                     l1_loss_grad, lmk_loss, lmk_loss_grad, reg_loss, reg_loss_grads,
                     ssim, ssim_with_grad, temp_loss, temp_loss_grads)
from .mesh import (DeformedMesh, TemplateMesh, apply_rigid_pose, apply_vertex_offsets,
                   landmark_positions, rigid_pose_backward, RigidPose)
from .rasterizer import GradientSet, render_backward, render_tiled
from .uvgrid import UVSampleTable, sample_positions, sample_positions_backward

PARAM_GROUPS = (
    "vertex_offsets",
    "pose_rotation",
    "pose_translation",
    "delta_pos",
    "delta_rot",
    "delta_scale",
    "opacity",
    "color",
)

# Per-group defaults mirroring the per-decoder rates of the training setup:
# vertex decoder 1e-4, deltas decoder 1e-4, opacity/color decoders 6e-4,
# pose (encoder role) 5e-4.
DEFAULT_LEARNING_RATES = {
    "vertex_offsets": 1e-4,
    "pose_rotation": 5e-4,
    "pose_translation": 5e-4,
    "delta_pos": 1e-4,
    "delta_rot": 1e-4,
    "delta_scale": 1e-4,
    "opacity": 6e-4,
    "color": 6e-4,
}


class FitDivergenceError(RuntimeError):
    """Raised when the total loss turns non-finite during fitting."""

    def __init__(self, message: str, params: AvatarParams | None = None, iteration: int = -1):
        super().__init__(message)
        self.params = params
        self.iteration = iteration


@dataclass
class AdamState:
    """First/second moment accumulators plus per-group learning rates."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    learning_rates: dict[str, float]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_values(cls, values: dict[str, np.ndarray],
                   learning_rates: dict[str, float] | None = None) -> "AdamState":
        rates = dict(DEFAULT_LEARNING_RATES)
        if learning_rates:
            rates.update(learning_rates)
        for name, lr in rates.items():
            if lr <= 0.0:
                raise ValueError(f"learning rate for group '{name}' must be positive")
        return cls(
            m={k: np.zeros_like(np.asarray(a, dtype=np.float64)) for k, a in values.items()},
            v={k: np.zeros_like(np.asarray(a, dtype=np.float64)) for k, a in values.items()},
            learning_rates=rates,
        )


def adam_step(state: AdamState, values: dict[str, np.ndarray],
              grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> dict[str, np.ndarray]:
    """One Adam update with bias correction; returns the new parameter values.

    Groups missing from `grads` are left untouched.  A non-finite gradient
    rejects the whole step and reports the offending group.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in parameter group '{name}'; step rejected")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out: dict[str, np.ndarray] = {}
    for name, value in values.items():
        value = np.asarray(value, dtype=np.float64)
        if name not in grads:
            out[name] = value.copy()
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        lr = state.learning_rates.get(name, 1e-3) * lr_scale
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class FitConfig:
    """Knobs for one fitting run."""

    iterations: int = 200
    learning_rates: dict[str, float] = field(default_factory=dict)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimize_groups: tuple[str, ...] | None = None  # None = all groups
    cameras_per_step: int = 0                       # 0 = every camera each step
    snapshot_every: int = 0                         # 0 = no intermediate snapshots
    seed: int = 0
    tile_size: int = 16
    threads: int = 1
    lr_decay_target: float | None = None            # final lr multiplier (exponential schedule)
    background: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for name in self.learning_rates:
            if name not in PARAM_GROUPS:
                raise ValueError(f"unknown parameter group '{name}'")
        if self.optimize_groups is not None:
            for name in self.optimize_groups:
                if name not in PARAM_GROUPS:
                    raise ValueError(f"unknown parameter group '{name}'")

    def lr_scale(self, iteration: int) -> float:
        if self.lr_decay_target is None or self.iterations <= 1:
            return 1.0
        frac = iteration / (self.iterations - 1)
        return float(self.lr_decay_target ** frac)


@dataclass
class FrameObservations:
    """Targets and supervision available for one frame."""

    cameras: list[Camera]
    targets: list[ImageBuffer]
    tracked_vertices: np.ndarray | None = None      # enables the geometric term
    reference_landmarks: np.ndarray | None = None   # enables the landmark term

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("need at least one camera")
        if len(self.targets) != len(self.cameras):
            raise ValueError("one target image per camera required")
        for cam, img in zip(self.cameras, self.targets):
            if img.height != cam.height or img.width != cam.width:
                raise ValueError("target dimensions must match the camera record")


@dataclass
class FitResult:
    params: AvatarParams
    history: list[LossReport]
    renders: list[ImageBuffer]  # final renders, one per camera


def _params_to_values(params: AvatarParams) -> dict[str, np.ndarray]:
    return {
        "vertex_offsets": params.vertex_offsets,
        "pose_rotation": params.pose.rotation,
        "pose_translation": params.pose.translation,
        "delta_pos": params.delta_pos,
        "delta_rot": params.delta_rot,
        "delta_scale": params.delta_scale,
        "opacity": params.opacity_raw,
        "color": params.color_raw,
    }


def _values_to_params(values: dict[str, np.ndarray]) -> AvatarParams:
    return AvatarParams(
        vertex_offsets=values["vertex_offsets"],
        pose=RigidPose(values["pose_rotation"], values["pose_translation"]),
        delta_pos=values["delta_pos"],
        delta_rot=values["delta_rot"],
        delta_scale=values["delta_scale"],
        opacity_raw=values["opacity"],
        color_raw=values["color"],
    )


def initialize_for_fit(template: TemplateMesh, table: UVSampleTable) -> CloudInit:
    """First-frame cloud init: anchors on the rest-pose template (zero params)."""
    return initialize_cloud(table, DeformedMesh(template.vertices))


def reconstruct_primitives(template: TemplateMesh, table: UVSampleTable,
                           params: AvatarParams, scale_init_raw: np.ndarray):
    """Rebuild (init, primitives) from snapshot state: the mesh pipeline is
    re-run from the stored parameters and the cached scale init is reused."""
    deformed = apply_vertex_offsets(template, params.vertex_offsets)
    posed = apply_rigid_pose(deformed, params.pose)
    anchors = sample_positions(table, posed)
    n = len(anchors)
    if params.gaussian_count != n or scale_init_raw.shape[0] != n:
        raise ValueError(
            f"snapshot holds {params.gaussian_count} gaussians, UV table has {n} valid texels")
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    init = CloudInit(
        positions=anchors,
        rotations=rotations,
        scales=softplus(scale_init_raw),
        raw_scales=np.asarray(scale_init_raw, dtype=np.float64),
        face_index=table.face_index[table.valid],
        bary=table.bary_valid,
    )
    return init, apply_deltas(init, params)


def evaluate_frame(template: TemplateMesh, table: UVSampleTable, init: CloudInit,
                   params: AvatarParams, frame: FrameObservations, config: FitConfig,
                   prev_deltas: AvatarParams | None = None,
                   camera_subset: list[int] | None = None,
                   with_grads: bool = True):
    """One forward(+backward) pass; returns (report, grads, renders).

    `grads` is a dict over parameter groups, already combining the image
    terms with the geometric, landmark, regularization, and temporal terms.
    """
    w = config.loss_weights
    cam_ids = camera_subset if camera_subset is not None else list(range(len(frame.cameras)))
    n_cams = len(cam_ids)

    deformed = apply_vertex_offsets(template, params.vertex_offsets)
    posed = apply_rigid_pose(deformed, params.pose)
    anchors = sample_positions(table, posed)
    prims = apply_deltas(init, params, anchor_positions=anchors)

    renders = []
    l1_vals = []
    ssim_vals = []
    grad_set = GradientSet.zeros(len(prims)) if with_grads else None
    for ci in cam_ids:
        cam = frame.cameras[ci]
        target = frame.targets[ci].array
        if with_grads:
            img, render_state = render_tiled(
                prims, cam, tile_size=config.tile_size, channels=3,
                background=config.background, threads=config.threads, return_state=True)
            ssim_val, d_ssim = ssim_with_grad(img.array, target)
            upstream = (w.l1 * l1_loss_grad(img.array, target) - w.ssim * d_ssim) / n_cams
            grad_set.add(render_backward(prims, cam, upstream, background=config.background,
                                         threads=config.threads, state=render_state))
        else:
            img = render_tiled(prims, cam, tile_size=config.tile_size, channels=3,
                               background=config.background, threads=config.threads)
            ssim_val = ssim(img.array, target)
        renders.append(img)
        l1_vals.append(l1_loss(img.array, target))
        ssim_vals.append(ssim_val)

    geo_val = 0.0
    lmk_val = 0.0
    reg_val = reg_loss(prims, params.delta_pos, params.delta_rot)
    temp_val = temp_loss(params, prev_deltas) if prev_deltas is not None else 0.0
    if frame.tracked_vertices is not None:
        geo_val = geo_loss(deformed.vertices, frame.tracked_vertices)
    posed_lmk = landmark_positions(posed, template)
    if frame.reference_landmarks is not None and len(posed_lmk):
        lmk_val = lmk_loss(posed_lmk, frame.reference_landmarks)

    l1_mean = float(np.mean(l1_vals))
    ssim_mean = float(np.mean(ssim_vals))
    total = (w.l1 * l1_mean + w.ssim * (1.0 - ssim_mean) + w.geo * geo_val
             + w.temp * temp_val + w.lmk * lmk_val + w.reg * reg_val)
    report = LossReport(l1=l1_mean, ssim=ssim_mean, geo=geo_val, perc=0.0,
                        temp=temp_val, lmk=lmk_val, reg=reg_val, total=total)
    if not with_grads:
        return report, None, renders

    cloud_grads = apply_deltas_backward(init, params, grad_set)
    reg_ds, reg_dp, reg_dr = reg_loss_grads(prims, params.delta_pos, params.delta_rot)
    g_delta_pos = cloud_grads["delta_pos"] + w.reg * reg_dp
    g_delta_rot = cloud_grads["delta_rot"] + w.reg * reg_dr
    g_delta_scale = cloud_grads["delta_scale"] + w.reg * reg_ds * softplus_grad_from_value(prims.scales)
    if prev_deltas is not None:
        t_dp, t_dr, t_ds = temp_loss_grads(params, prev_deltas)
        g_delta_pos += w.temp * t_dp
        g_delta_rot += w.temp * t_dr
        g_delta_scale += w.temp * t_ds

    d_posed = sample_positions_backward(table, template.vertex_count, cloud_grads["anchors"])
    if frame.reference_landmarks is not None and len(posed_lmk):
        d_posed[template.rigid_landmark_indices] += w.lmk * lmk_loss_grad(
            posed_lmk, frame.reference_landmarks)
    d_quat, d_translation, d_vertices = rigid_pose_backward(deformed, params.pose, d_posed)
    if frame.tracked_vertices is not None:
        d_vertices = d_vertices + w.geo * geo_loss_grad(deformed.vertices, frame.tracked_vertices)

    grads = {
        "vertex_offsets": d_vertices,
        "pose_rotation": d_quat,
        "pose_translation": d_translation,
        "delta_pos": g_delta_pos,
        "delta_rot": g_delta_rot,
        "delta_scale": g_delta_scale,
        "opacity": cloud_grads["opacity_raw"],
        "color": cloud_grads["color_raw"],
    }
    return report, grads, renders


def fit_frame(template: TemplateMesh, table: UVSampleTable, init: CloudInit,
              params0: AvatarParams, frame: FrameObservations, config: FitConfig,
              prev_deltas: AvatarParams | None = None,
              snapshot_callback=None, stop_callback=None) -> FitResult:
    """Optimize one frame's parameters against its target images.

    `snapshot_callback(iteration, params)` fires every config.snapshot_every
    iterations; `stop_callback(iteration, report, renders)` may return True
    to stop early (used by convergence-gated runs).
    """
    params = params0.copy()
    values = _params_to_values(params)
    state = AdamState.for_values(values, config.learning_rates)
    active = set(config.optimize_groups) if config.optimize_groups is not None else set(PARAM_GROUPS)
    rng = np.random.default_rng(config.seed)
    history: list[LossReport] = []
    renders: list[ImageBuffer] = []

    n_cams = len(frame.cameras)
    for it in range(config.iterations):
        if 0 < config.cameras_per_step < n_cams:
            subset = sorted(rng.choice(n_cams, size=config.cameras_per_step, replace=False).tolist())
        else:
            subset = None
        report, grads, renders = evaluate_frame(
            template, table, init, params, frame, config,
            prev_deltas=prev_deltas, camera_subset=subset)
        history.append(report)
        if not np.isfinite(report.total):
            raise FitDivergenceError(
                f"total loss became non-finite at iteration {it}", params=params, iteration=it)
        grads = {k: v for k, v in grads.items() if k in active}
        values = adam_step(state, values, grads, lr_scale=config.lr_scale(it))
        params = _values_to_params(values)
        if snapshot_callback and config.snapshot_every > 0 and (it + 1) % config.snapshot_every == 0:
            snapshot_callback(it + 1, params)
        if stop_callback and stop_callback(it, report, renders):
            break
    return FitResult(params=params, history=history, renders=renders)


def fit_sequence(template: TemplateMesh, table: UVSampleTable, init: CloudInit,
                 frames: list[FrameObservations], config: FitConfig,
                 params0: AvatarParams | None = None,
                 snapshot_callback=None) -> list[FitResult]:
    """Fit frames in order with warm starts and the temporal coupling term."""
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    params = params0.copy() if params0 is not None else AvatarParams.zeros(
        template.vertex_count, len(init))
    results: list[FitResult] = []
    prev: AvatarParams | None = None
    for t, frame in enumerate(frames):
        cb = (lambda it, p, _t=t: snapshot_callback(_t, it, p)) if snapshot_callback else None
        result = fit_frame(template, table, init, params, frame, config,
                           prev_deltas=prev, snapshot_callback=cb)
        results.append(result)
        params = result.params.copy()
        prev = result.params
    return results
