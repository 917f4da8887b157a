"""Differentiable tile-based Gaussian splatting for deformable head avatars.

The pipeline: a template mesh is deformed by per-vertex offsets, rigidly
posed, and covered with one anisotropic 3D Gaussian per valid UV texel.
Per-gaussian position/rotation/scale deltas and opacity/color grids refine
the cloud, a tile-binned rasterizer splats it to images, and every stage
has analytic gradients so avatar parameters can be fitted to target images
with Adam.
"""

from .camera import Camera, gaussian_density_2d, perspective_jacobian, project_covariance
from .cloud import (AvatarParams, CloudInit, GaussianPrimitives, apply_deltas,
                    initialize_cloud)
from .fitting import (AdamState, FitConfig, FitDivergenceError, FrameObservations,
                      FitResult, adam_step, fit_frame, fit_sequence,
                      initialize_for_fit, reconstruct_primitives)
from .images import ImageBuffer, read_png, read_raw, write_png, write_raw
from .losses import (LossReport, LossWeights, geo_loss, l1_loss, lmk_loss, psnr,
                     reg_loss, ssim, temp_loss, total_objective)
from .mesh import (DeformedMesh, RigidPose, TemplateMesh, apply_rigid_pose,
                   apply_vertex_offsets, landmark_positions, load_obj, view_direction,
                   write_obj)
from .rasterizer import (GradientSet, ProfileReport, SplatRecord, profile_render,
                         render_backward, render_reference, render_tiled, splat_records)
from .rotations import build_covariance, normalize_quat, quat_to_rotation
from .snapshot import load_params, read_container, save_params, write_container
from .uvgrid import UVSampleTable, build_uv_sample_table, sample_positions

__version__ = "0.1.0"

__all__ = [
    "AdamState", "AvatarParams", "Camera", "CloudInit", "DeformedMesh",
    "FitConfig", "FitDivergenceError", "FitResult", "FrameObservations",
    "GaussianPrimitives", "GradientSet", "ImageBuffer", "LossReport",
    "LossWeights", "ProfileReport", "RigidPose", "SplatRecord", "TemplateMesh",
    "UVSampleTable", "adam_step", "apply_deltas", "apply_rigid_pose",
    "apply_vertex_offsets", "build_covariance", "build_uv_sample_table",
    "fit_frame", "fit_sequence", "gaussian_density_2d", "geo_loss",
    "initialize_cloud", "initialize_for_fit", "l1_loss", "landmark_positions",
    "lmk_loss", "load_obj", "load_params", "normalize_quat",
    "perspective_jacobian", "profile_render", "project_covariance", "psnr",
    "quat_to_rotation", "read_container", "read_png", "read_raw",
    "reconstruct_primitives", "reg_loss", "render_backward", "render_reference",
    "render_tiled", "sample_positions", "save_params", "splat_records", "ssim",
    "temp_loss", "total_objective", "view_direction", "write_container",
    "write_obj", "write_png", "write_raw",
]
