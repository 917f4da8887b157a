"""Procedural test scenes: a low-poly head mesh, orbit cameras, and a
self-contained demo scene on disk (mesh, cameras, targets, config).

Usage: python -m headsplat.synth --out demo_scene
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .camera import Camera
from .cloud import AvatarParams, initialize_cloud, logit
from .fitting import reconstruct_primitives
from .images import write_png
from .mesh import DeformedMesh, TemplateMesh, write_obj
from .rasterizer import render_tiled
from .snapshot import load_params, save_params, write_container
from .uvgrid import build_uv_sample_table


def make_head_mesh(slices: int = 16, stacks: int = 12, radius: float = 0.09) -> TemplateMesh:
    """Egg-shaped lat/long sphere head with a full-square UV atlas.

    The UV seam is handled by per-corner UVs (slices+1 texture columns), so
    every texel of the unit square falls inside some triangle.  Four
    "eye corner" vertices on an upper front ring serve as rigid landmarks.
    """
    axes = np.array([0.80, 1.05, 0.92]) * radius  # x right, y up, z toward the face
    verts = [np.array([0.0, axes[1], 0.0])]       # top pole
    for i in range(1, stacks):
        theta = np.pi * i / stacks
        for j in range(slices):
            phi = 2.0 * np.pi * j / slices
            verts.append(axes * np.array([
                np.sin(theta) * np.sin(phi),
                np.cos(theta),
                np.sin(theta) * np.cos(phi),
            ]))
    verts.append(np.array([0.0, -axes[1], 0.0]))  # bottom pole
    verts = np.asarray(verts)

    def ring_vertex(ring: int, j: int) -> int:
        return 1 + (ring - 1) * slices + (j % slices)

    def uv(j: float, ring: float) -> tuple[float, float]:
        return (j / slices, ring / stacks)

    faces = []
    face_uvs = []
    for j in range(slices):
        faces.append([0, ring_vertex(1, j), ring_vertex(1, j + 1)])
        face_uvs.append([uv(j + 0.5, 0), uv(j, 1), uv(j + 1, 1)])
    for ring in range(1, stacks - 1):
        for j in range(slices):
            a = ring_vertex(ring, j)
            b = ring_vertex(ring, j + 1)
            c = ring_vertex(ring + 1, j)
            d = ring_vertex(ring + 1, j + 1)
            faces.append([a, c, d])
            face_uvs.append([uv(j, ring), uv(j, ring + 1), uv(j + 1, ring + 1)])
            faces.append([a, d, b])
            face_uvs.append([uv(j, ring), uv(j + 1, ring + 1), uv(j + 1, ring)])
    bottom = len(verts) - 1
    for j in range(slices):
        faces.append([ring_vertex(stacks - 1, j), bottom, ring_vertex(stacks - 1, j + 1)])
        face_uvs.append([uv(j, stacks - 1), uv(j + 0.5, stacks), uv(j + 1, stacks - 1)])

    # two vertices per eye on an upper-front ring
    eye_ring = max(stacks // 3, 1)
    landmarks = [
        ring_vertex(eye_ring, 1), ring_vertex(eye_ring, 2),
        ring_vertex(eye_ring, slices - 2), ring_vertex(eye_ring, slices - 1),
    ]
    return TemplateMesh(vertices=verts, faces=np.asarray(faces),
                        face_uvs=np.asarray(face_uvs),
                        rigid_landmark_indices=np.asarray(landmarks))


def lookat_camera(eye, target, width: int, height: int, focal: float,
                  up=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at `eye` looking at `target`; image y points down in world-up terms."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z_c = target - eye
    z_c = z_c / np.linalg.norm(z_c)
    y_c = -up + np.dot(up, z_c) * z_c
    y_c = y_c / np.linalg.norm(y_c)
    x_c = np.cross(y_c, z_c)
    rot = np.stack([x_c, y_c, z_c], axis=0)
    return Camera(width=width, height=height, fx=focal, fy=focal,
                  cx=width / 2.0, cy=height / 2.0,
                  rotation=rot, translation=-rot @ eye)


def orbit_cameras(n: int, width: int, height: int, focal: float,
                  distance: float = 0.45, center=(0.0, 0.0, 0.0),
                  elevation: float = 0.15, phase: float = 0.31) -> list[Camera]:
    """n cameras on a ring around the head, all aimed at its center.

    The angular phase keeps every view axis off the head's mirror plane;
    an aligned axis gives mirror-paired gaussians exactly equal depths,
    and depth-tied splats make the rendered image discontinuous in the
    parameters (the compositing order tie-breaks by index).
    """
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(n):
        phi = phase + 2.0 * np.pi * k / n
        eye = center + distance * np.array([
            np.sin(phi) * np.cos(elevation),
            np.sin(elevation),
            np.cos(phi) * np.cos(elevation),
        ])
        cams.append(lookat_camera(eye, center, width, height, focal))
    return cams


def camera_to_dict(cam: Camera) -> dict:
    w2c = np.eye(4)
    w2c[:3, :3] = cam.rotation
    w2c[:3, 3] = cam.translation
    return {
        "width": cam.width, "height": cam.height,
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "world_to_camera": [float(v) for v in w2c.reshape(-1)],
    }


def make_reference_params(template: TemplateMesh, table, seed: int = 0) -> AvatarParams:
    """Ground-truth avatar state: zero deltas, near-opaque splats, UV-patterned colors."""
    n = table.valid_count
    params = AvatarParams.zeros(template.vertex_count, n)
    params.opacity_raw[:] = 3.0
    centers = _valid_texel_centers(table)
    u, v = centers[:, 0], centers[:, 1]
    colors = np.stack([
        0.5 + 0.4 * np.sin(2.0 * np.pi * (2.0 * u + 0.3)),
        0.5 + 0.4 * np.sin(2.0 * np.pi * (3.0 * v + 0.1)),
        0.5 + 0.4 * np.sin(2.0 * np.pi * (u + 2.0 * v)),
    ], axis=1)
    params.color_raw[:] = logit(np.clip(colors, 0.05, 0.95))
    return params


def _valid_texel_centers(table) -> np.ndarray:
    res = table.resolution
    idx = np.flatnonzero(table.valid)
    iu = idx % res
    iv = idx // res
    return np.stack([(iu + 0.5) / res, (iv + 0.5) / res], axis=1)


def build_demo_scene(out_dir, n_views: int = 3, image_size: int = 128,
                     grid_resolution: int = 24, n_frames: int = 1,
                     seed: int = 0) -> Path:
    """Write a complete synthetic scene and return the config path.

    Targets are renders of a known ground-truth avatar, so a fit against
    them is a pure round-trip problem.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = make_head_mesh()
    write_obj(out / "head.obj", template)

    table = build_uv_sample_table(template, grid_resolution)
    focal = image_size * 1.7
    cams = orbit_cameras(n_views, image_size, image_size, focal)
    cam_paths = []
    for k, cam in enumerate(cams):
        path = out / f"camera_{k}.json"
        path.write_text(json.dumps(camera_to_dict(cam), indent=1), encoding="utf-8")
        cam_paths.append(path.name)

    truth = make_reference_params(template, table, seed=seed)
    init = initialize_cloud(table, DeformedMesh(template.vertices))
    save_params(out / "truth.snap", truth, init.raw_scales, grid_resolution, 0)
    # render targets from the float32-roundtripped snapshot so that
    # `render --snapshot truth.snap` reproduces them byte-exactly
    truth_q, scale_init_q, _ = load_params(out / "truth.snap")
    _, prims = reconstruct_primitives(template, table, truth_q, scale_init_q)

    frames = []
    for f in range(n_frames):
        targets = []
        for k, cam in enumerate(cams):
            img = render_tiled(prims, cam)
            name = f"target_f{f:04d}_c{k}.png"
            write_png(out / name, img)
            targets.append(name)
        frames.append({"targets": targets})

    write_container(out / "tracked_vertices.hsc", {"vertices": template.vertices},
                    {"kind": "tracked_vertices"})
    lmk = template.vertices[template.rigid_landmark_indices]
    write_container(out / "rigid_landmarks.hsc", {"landmarks": lmk},
                    {"kind": "rigid_landmarks"})

    config = {
        "template_obj": "head.obj",
        "landmark_indices": [int(i) for i in template.rigid_landmark_indices],
        "uv_resolution": grid_resolution,
        "cameras": cam_paths,
        "frames": frames,
        "tracked_vertices": "tracked_vertices.hsc",
        "rigid_landmarks": "rigid_landmarks.hsc",
        # rates sized for direct per-frame fitting from a cold start
        "fit": {
            "iterations": 400,
            "seed": seed,
            "tile_size": 32,
            "lr_decay_target": 0.05,
            "learning_rates": {
                "vertex_offsets": 2e-3, "pose_rotation": 2e-3, "pose_translation": 2e-3,
                "delta_pos": 2e-3, "delta_rot": 2e-3, "delta_scale": 2e-3,
                "opacity": 2e-2, "color": 2e-2,
            },
        },
    }
    config_path = out / "scene.json"
    config_path.write_text(json.dumps(config, indent=1), encoding="utf-8")
    return config_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="write a synthetic demo scene")
    parser.add_argument("--out", required=True)
    parser.add_argument("--views", type=int, default=3)
    parser.add_argument("--size", type=int, default=128)
    parser.add_argument("--grid", type=int, default=24)
    parser.add_argument("--frames", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    path = build_demo_scene(args.out, n_views=args.views, image_size=args.size,
                            grid_resolution=args.grid, n_frames=args.frames, seed=args.seed)
    print(f"wrote scene config to {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
