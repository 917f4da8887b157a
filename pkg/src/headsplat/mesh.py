"""Template mesh storage, coarse deformation, and rigid posing.

The deformation pipeline is: rest-pose template vertices -> per-vertex
offsets (expression) -> rigid rotation about the world origin plus a
translation (head pose).  Rotation is applied about the origin with no
pivot; any pivot can be absorbed into the translation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .camera import Camera
from .rotations import quat_to_rotation, rotation_backward


@dataclass(frozen=True)
class TemplateMesh:
    """Rest-pose triangle mesh with per-corner UVs and rigid landmark indices."""

    vertices: np.ndarray          # (V, 3) meters
    faces: np.ndarray             # (F, 3) vertex indices
    face_uvs: np.ndarray          # (F, 3, 2) per-corner UV in [0, 1]
    rigid_landmark_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "face_uvs", np.asarray(self.face_uvs, dtype=np.float64).reshape(-1, 3, 2))
        object.__setattr__(
            self, "rigid_landmark_indices", np.asarray(self.rigid_landmark_indices, dtype=np.int64).reshape(-1)
        )
        if self.face_uvs.shape[0] != self.faces.shape[0]:
            raise ValueError("face_uvs must match faces")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")
        if self.face_uvs.size and (self.face_uvs.min() < -1e-9 or self.face_uvs.max() > 1.0 + 1e-9):
            raise ValueError("UV coordinates must lie in [0, 1]")
        if self.rigid_landmark_indices.size and (
            self.rigid_landmark_indices.min() < 0 or self.rigid_landmark_indices.max() >= len(self.vertices)
        ):
            raise ValueError("landmark index out of range")

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    def with_landmarks(self, indices) -> "TemplateMesh":
        return replace(self, rigid_landmark_indices=np.asarray(indices, dtype=np.int64))


@dataclass(frozen=True)
class RigidPose:
    """Global head pose: quaternion rotation (about the world origin) + translation."""

    rotation: np.ndarray       # (4,) quaternion, wxyz, normalized at use
    translation: np.ndarray    # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


@dataclass(frozen=True)
class DeformedMesh:
    """Vertex positions after deformation and/or posing; template topology applies."""

    vertices: np.ndarray  # (V, 3)

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))


def apply_vertex_offsets(template: TemplateMesh, offsets: np.ndarray) -> DeformedMesh:
    """Add per-vertex expression offsets on top of the rest-pose template."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != template.vertices.shape:
        raise ValueError(
            f"offsets shape {offsets.shape} does not match vertex count {template.vertices.shape}"
        )
    return DeformedMesh(template.vertices + offsets)


def apply_rigid_pose(mesh: DeformedMesh, pose: RigidPose) -> DeformedMesh:
    rot = quat_to_rotation(pose.rotation)
    return DeformedMesh(mesh.vertices @ rot.T + pose.translation)


def rigid_pose_backward(
    mesh: DeformedMesh, pose: RigidPose, d_posed: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pull dL/d(posed vertices) back to (quaternion, translation, unposed vertices)."""
    d_posed = np.asarray(d_posed, dtype=np.float64)
    rot = quat_to_rotation(pose.rotation)
    d_translation = d_posed.sum(axis=0)
    d_vertices = d_posed @ rot
    d_rotmat = d_posed.T @ mesh.vertices
    d_quat = rotation_backward(pose.rotation, d_rotmat)
    return d_quat, d_translation, d_vertices


def landmark_positions(mesh: DeformedMesh, template: TemplateMesh) -> np.ndarray:
    """Posed positions of the rigid landmark vertices, shape (N_L, 3)."""
    idx = template.rigid_landmark_indices
    if idx.size and idx.max() >= len(mesh.vertices):
        raise ValueError("landmark index out of range for this mesh")
    return mesh.vertices[idx]


def view_direction(mesh: DeformedMesh, cam: Camera) -> np.ndarray:
    """Object-centric view direction: posed-head mean minus the camera center.

    Exposed for completeness; colors in this artifact are view-independent.
    """
    return mesh.vertices.mean(axis=0) - cam.center


def load_obj(path) -> TemplateMesh:
    """Read a Wavefront OBJ: positions, UVs, triangulated `v/vt` faces.

    Polygons with more than three corners are fan-triangulated; normals and
    materials are ignored.  Faces without `vt` references get zero UVs.
    """
    positions: list[list[float]] = []
    uvs: list[list[float]] = []
    face_v: list[tuple[int, int, int]] = []
    face_t: list[tuple[int, int, int]] = []

    def parse_corner(token: str) -> tuple[int, int]:
        parts = token.split("/")
        vi = int(parts[0])
        ti = int(parts[1]) if len(parts) > 1 and parts[1] else 0
        return vi, ti

    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if tokens[0] == "v":
                positions.append([float(tokens[1]), float(tokens[2]), float(tokens[3])])
            elif tokens[0] == "vt":
                uvs.append([float(tokens[1]), float(tokens[2])])
            elif tokens[0] == "f":
                corners = [parse_corner(t) for t in tokens[1:]]
                if len(corners) < 3:
                    raise ValueError(f"face with fewer than 3 corners in {path}")
                for k in range(1, len(corners) - 1):
                    tri = (corners[0], corners[k], corners[k + 1])
                    face_v.append(tuple(c[0] for c in tri))
                    face_t.append(tuple(c[1] for c in tri))

    verts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    uv_arr = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)

    def resolve(idx: int, count: int) -> int:
        # OBJ indices are 1-based; negative indices count from the end
        return idx - 1 if idx > 0 else count + idx

    fv = np.array([[resolve(i, len(verts)) for i in tri] for tri in face_v], dtype=np.int64).reshape(-1, 3)
    fuv = np.zeros((len(face_v), 3, 2), dtype=np.float64)
    for f, tri in enumerate(face_t):
        for c, ti in enumerate(tri):
            if ti != 0:
                fuv[f, c] = uv_arr[resolve(ti, len(uv_arr))]
    return TemplateMesh(vertices=verts, faces=fv, face_uvs=fuv)


def write_obj(path, mesh: TemplateMesh) -> None:
    """Write a mesh with per-corner UVs as `v/vt` faces (one vt per corner).

    Coordinates use 17 significant digits so float64 values round-trip exactly.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for f in range(len(mesh.faces)):
            for c in range(3):
                uv = mesh.face_uvs[f, c]
                fh.write(f"vt {uv[0]:.17g} {uv[1]:.17g}\n")
        for f, tri in enumerate(mesh.faces):
            t0 = 3 * f + 1
            fh.write(f"f {tri[0] + 1}/{t0} {tri[1] + 1}/{t0 + 1} {tri[2] + 1}/{t0 + 2}\n")
