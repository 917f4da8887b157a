"""Gaussian cloud: anchoring on the posed mesh and fine-step refinement.

Raw (pre-activation) parameters are unconstrained reals.  Activations map
them to valid ranges: sigmoid for opacity and color, softplus for scale.
Scale deltas act in raw (pre-softplus) space on top of the inverse-softplus
of the cached initial scales, so a zero delta reproduces the init exactly
and any raw value yields a strictly positive scale.  Rotation deltas add
componentwise to the identity quaternion and are normalized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import DeformedMesh, RigidPose
from .rotations import normalize_quat, normalize_quat_backward
from .uvgrid import UVSampleTable, sample_positions

_ACT_CLIP = 1e-15  # keeps sigmoid outputs strictly inside (0, 1) for any finite raw value

SCALE_INIT_NEIGHBORS = 3


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _ACT_CLIP, 1.0 - _ACT_CLIP)


def logit(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.log(y) - np.log1p(-y)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def inv_softplus(y: np.ndarray) -> np.ndarray:
    """Inverse of softplus: log(exp(y) - 1), stable for small and large y."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("inv_softplus requires positive inputs")
    return y + np.log(-np.expm1(-y))


def softplus_grad_from_value(y: np.ndarray) -> np.ndarray:
    """d softplus(x)/dx expressed via the activated value y = softplus(x)."""
    return -np.expm1(-np.asarray(y, dtype=np.float64))


@dataclass(frozen=True)
class GaussianPrimitives:
    """Renderable Gaussian set (struct of arrays, activated values)."""

    positions: np.ndarray   # (N, 3) meters
    rotations: np.ndarray   # (N, 4) quaternions, normalized at use
    scales: np.ndarray      # (N, 3) meters, strictly positive
    opacities: np.ndarray   # (N,) in [0, 1]
    colors: np.ndarray      # (N, 3) in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64).reshape(-1, 3))
        n = len(self.positions)
        object.__setattr__(self, "rotations", np.asarray(self.rotations, dtype=np.float64).reshape(n, 4))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=np.float64).reshape(n, 3))
        object.__setattr__(self, "opacities", np.asarray(self.opacities, dtype=np.float64).reshape(n))
        object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float64).reshape(n, 3))
        if np.any(self.scales <= 0.0):
            raise ValueError("scales must be strictly positive")
        if np.any(self.opacities < 0.0) or np.any(self.opacities > 1.0):
            raise ValueError("opacities must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.positions)


@dataclass(frozen=True)
class CloudInit:
    """First-frame Gaussian initialization: anchors, identity rotations, cached scales."""

    positions: np.ndarray      # (N, 3) anchor positions on the posed mesh
    rotations: np.ndarray      # (N, 4) identity quaternions
    scales: np.ndarray         # (N, 3) isotropic init, mean kNN distance
    raw_scales: np.ndarray     # (N, 3) inverse-softplus of scales
    face_index: np.ndarray     # (N,) source triangle per texel
    bary: np.ndarray           # (N, 3) source barycentrics

    def __len__(self) -> int:
        return len(self.positions)


def initialize_cloud(
    table: UVSampleTable, posed: DeformedMesh, k: int = SCALE_INIT_NEIGHBORS
) -> CloudInit:
    """Anchor one Gaussian per valid texel on the posed mesh.

    Scales are isotropic, set to the mean distance to the k nearest anchors
    (computed once here and cached); rotations start at the identity.
    """
    positions = sample_positions(table, posed)
    n = len(positions)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} valid texels for scale init, got {n}")
    tree = cKDTree(positions)
    dist, _ = tree.query(positions, k=k + 1)
    mean_nn = dist[:, 1:].mean(axis=1)
    scales = np.repeat(np.maximum(mean_nn, 1e-8)[:, None], 3, axis=1)
    rotations = np.zeros((n, 4), dtype=np.float64)
    rotations[:, 0] = 1.0
    return CloudInit(
        positions=positions,
        rotations=rotations,
        scales=scales,
        raw_scales=inv_softplus(scales),
        face_index=table.face_index[table.valid],
        bary=table.bary_valid,
    )


@dataclass
class AvatarParams:
    """Per-frame optimizable avatar state (all values raw / pre-activation)."""

    vertex_offsets: np.ndarray  # (V, 3)
    pose: RigidPose
    delta_pos: np.ndarray       # (N, 3)
    delta_rot: np.ndarray       # (N, 4)
    delta_scale: np.ndarray     # (N, 3)
    opacity_raw: np.ndarray     # (N,)
    color_raw: np.ndarray       # (N, 3)

    def __post_init__(self):
        self.vertex_offsets = np.asarray(self.vertex_offsets, dtype=np.float64).reshape(-1, 3)
        self.delta_pos = np.asarray(self.delta_pos, dtype=np.float64).reshape(-1, 3)
        n = len(self.delta_pos)
        self.delta_rot = np.asarray(self.delta_rot, dtype=np.float64).reshape(n, 4)
        self.delta_scale = np.asarray(self.delta_scale, dtype=np.float64).reshape(n, 3)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64).reshape(n)
        self.color_raw = np.asarray(self.color_raw, dtype=np.float64).reshape(n, 3)
        # 3 + 4 + 3 delta channels, 1 opacity, 3 color
        assert self.delta_pos.shape[1] + self.delta_rot.shape[1] + self.delta_scale.shape[1] == 10

    @property
    def gaussian_count(self) -> int:
        return len(self.delta_pos)

    @classmethod
    def zeros(cls, vertex_count: int, gaussian_count: int) -> "AvatarParams":
        return cls(
            vertex_offsets=np.zeros((vertex_count, 3)),
            pose=RigidPose.identity(),
            delta_pos=np.zeros((gaussian_count, 3)),
            delta_rot=np.zeros((gaussian_count, 4)),
            delta_scale=np.zeros((gaussian_count, 3)),
            opacity_raw=np.zeros(gaussian_count),
            color_raw=np.zeros((gaussian_count, 3)),
        )

    def copy(self) -> "AvatarParams":
        return AvatarParams(
            vertex_offsets=self.vertex_offsets.copy(),
            pose=RigidPose(self.pose.rotation.copy(), self.pose.translation.copy()),
            delta_pos=self.delta_pos.copy(),
            delta_rot=self.delta_rot.copy(),
            delta_scale=self.delta_scale.copy(),
            opacity_raw=self.opacity_raw.copy(),
            color_raw=self.color_raw.copy(),
        )


def apply_deltas(
    init: CloudInit, params: AvatarParams, anchor_positions: np.ndarray | None = None
) -> GaussianPrimitives:
    """Refine the initialized cloud into renderable primitives.

    `anchor_positions` overrides the cached init anchors when the posed mesh
    has moved since initialization (the per-frame fitting loop re-samples
    anchors every iteration while keeping the cached first-frame scales).
    """
    if params.gaussian_count != len(init):
        raise ValueError(
            f"parameter grids hold {params.gaussian_count} gaussians, init holds {len(init)}"
        )
    anchors = init.positions if anchor_positions is None else np.asarray(anchor_positions, dtype=np.float64)
    if anchors.shape != init.positions.shape:
        raise ValueError("anchor positions must match the initialized cloud")
    return GaussianPrimitives(
        positions=anchors + params.delta_pos,
        rotations=normalize_quat(init.rotations + params.delta_rot),
        scales=softplus(init.raw_scales + params.delta_scale),
        opacities=sigmoid(params.opacity_raw),
        colors=sigmoid(params.color_raw),
    )


def apply_deltas_backward(init: CloudInit, params: AvatarParams, grads) -> dict[str, np.ndarray]:
    """Map per-primitive gradients (a GradientSet) to raw parameter gradients.

    Returns gradients for delta_pos / delta_rot / delta_scale / opacity_raw /
    color_raw plus `anchors`, the gradient w.r.t. the anchor positions that
    the mesh pipeline consumes.
    """
    raw_rot = init.rotations + params.delta_rot
    return {
        "delta_pos": grads.d_position.copy(),
        "anchors": grads.d_position.copy(),
        "delta_rot": normalize_quat_backward(raw_rot, grads.d_rotation),
        "delta_scale": grads.d_scale_raw.copy(),
        "opacity_raw": grads.d_opacity_raw.copy(),
        "color_raw": grads.d_color_raw.copy(),
    }
