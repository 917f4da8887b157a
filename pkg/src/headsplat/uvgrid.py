"""UV-space sampling table: texel centers -> (face, barycentric) lookups.

One Gaussian is anchored per valid texel.  Texel (iu, iv) samples the UV
point ((iu + 0.5)/R, (iv + 0.5)/R); it is valid iff that point falls inside
some UV triangle.  Overlapping triangles tie-break to the lowest face
index, which keeps the table deterministic and topology-stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DeformedMesh, TemplateMesh

# Inclusive inside-test slack so texel centers exactly on a UV edge or
# vertex still count as covered.
_BARY_EPS = 1e-12


@dataclass(frozen=True)
class UVSampleTable:
    """Per-texel (face, barycentric, valid) records at a fixed resolution.

    Full-grid arrays are in row-major texel order (v outer, u inner); the
    compacted `corner_indices`/`bary_valid` arrays hold only valid texels in
    that same order and are what the Gaussian cloud samples from.
    """

    resolution: int
    face_index: np.ndarray      # (R*R,) int64, -1 for invalid texels
    bary: np.ndarray            # (R*R, 3) float64, zeros for invalid texels
    valid: np.ndarray           # (R*R,) bool
    corner_indices: np.ndarray  # (N_valid, 3) vertex indices
    bary_valid: np.ndarray      # (N_valid, 3)

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


def texel_centers(resolution: int) -> np.ndarray:
    """UV coordinates of all texel centers, shape (R*R, 2), row-major."""
    step = 1.0 / resolution
    u = (np.arange(resolution) + 0.5) * step
    uu, vv = np.meshgrid(u, u, indexing="xy")
    return np.stack([uu.ravel(), vv.ravel()], axis=-1)


def build_uv_sample_table(template: TemplateMesh, resolution: int) -> UVSampleTable:
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if template.face_uvs.size == 0 or not np.any(template.face_uvs):
        raise ValueError("template mesh has no UV coordinates")

    n = resolution * resolution
    face_index = np.full(n, -1, dtype=np.int64)
    bary = np.zeros((n, 3), dtype=np.float64)
    step = 1.0 / resolution

    for f in range(len(template.faces)):
        a, b, c = template.face_uvs[f]
        e0 = b - a
        e1 = c - a
        denom = e0[0] * e1[1] - e0[1] * e1[0]
        if abs(denom) < 1e-15:
            continue  # degenerate UV triangle covers no area

        lo = np.minimum(np.minimum(a, b), c)
        hi = np.maximum(np.maximum(a, b), c)
        iu0 = max(int(np.floor(lo[0] / step - 0.5)), 0)
        iu1 = min(int(np.ceil(hi[0] / step - 0.5)), resolution - 1)
        iv0 = max(int(np.floor(lo[1] / step - 0.5)), 0)
        iv1 = min(int(np.ceil(hi[1] / step - 0.5)), resolution - 1)
        if iu1 < iu0 or iv1 < iv0:
            continue

        us = (np.arange(iu0, iu1 + 1) + 0.5) * step
        vs = (np.arange(iv0, iv1 + 1) + 0.5) * step
        pu = us[None, :] - a[0]
        pv = vs[:, None] - a[1]
        w1 = (pu * e1[1] - pv * e1[0]) / denom
        w2 = (e0[0] * pv - e0[1] * pu) / denom
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -_BARY_EPS) & (w1 >= -_BARY_EPS) & (w2 >= -_BARY_EPS)

        rows = np.arange(iv0, iv1 + 1)[:, None] * resolution + np.arange(iu0, iu1 + 1)[None, :]
        hit = inside & (face_index[rows] < 0)
        if not np.any(hit):
            continue
        idx = rows[hit]
        face_index[idx] = f
        bary[idx, 0] = w0[hit]
        bary[idx, 1] = w1[hit]
        bary[idx, 2] = w2[hit]

    valid = face_index >= 0
    corner_indices = template.faces[face_index[valid]]
    return UVSampleTable(
        resolution=resolution,
        face_index=face_index,
        bary=bary,
        valid=valid,
        corner_indices=corner_indices,
        bary_valid=bary[valid],
    )


def sample_positions(table: UVSampleTable, mesh: DeformedMesh) -> np.ndarray:
    """Barycentric surface positions for all valid texels, shape (N_valid, 3)."""
    if table.corner_indices.size and table.corner_indices.max() >= len(mesh.vertices):
        raise ValueError("sample table was built against a different topology")
    corners = mesh.vertices[table.corner_indices]          # (N, 3, 3)
    return np.einsum("nk,nkd->nd", table.bary_valid, corners)


def sample_positions_backward(
    table: UVSampleTable, vertex_count: int, d_positions: np.ndarray
) -> np.ndarray:
    """Scatter dL/d(sample positions) back to per-vertex gradients."""
    d_positions = np.asarray(d_positions, dtype=np.float64)
    d_vertices = np.zeros((vertex_count, 3), dtype=np.float64)
    contrib = table.bary_valid[:, :, None] * d_positions[:, None, :]  # (N, 3, 3)
    np.add.at(d_vertices, table.corner_indices.ravel(), contrib.reshape(-1, 3))
    return d_vertices
