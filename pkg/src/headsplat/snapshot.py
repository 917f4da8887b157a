"""Array container files: UTF-8 JSON header + raw little-endian float32 blocks.

Layout: 8-byte magic, 4-byte little-endian header length, the JSON header,
then one contiguous float32 payload per array in header order.  The header
records array names, shapes, element type, grid resolution, and frame
index.  Round-trips are bit-exact: loading a file and saving it again
produces identical bytes.

Both parameter snapshots and raw float image dumps use this container.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .cloud import AvatarParams
from .mesh import RigidPose

MAGIC = b"HSPLAT01"

_PARAM_ARRAYS = (
    "vertex_offsets",
    "pose_rotation",
    "pose_translation",
    "delta_pos",
    "delta_rot",
    "delta_scale",
    "opacity_raw",
    "color_raw",
    "scale_init_raw",
)


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr32.shape), "dtype": "<f4"})
        payloads.append(arr32.tobytes())
    header = {"arrays": entries}
    if meta:
        header.update(meta)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a headsplat container file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated payload for array {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
    meta = {k: v for k, v in header.items() if k != "arrays"}
    return arrays, meta


def save_params(path, params: AvatarParams, scale_init_raw: np.ndarray,
                grid_resolution: int, frame: int) -> None:
    arrays = {
        "vertex_offsets": params.vertex_offsets,
        "pose_rotation": params.pose.rotation,
        "pose_translation": params.pose.translation,
        "delta_pos": params.delta_pos,
        "delta_rot": params.delta_rot,
        "delta_scale": params.delta_scale,
        "opacity_raw": params.opacity_raw,
        "color_raw": params.color_raw,
        "scale_init_raw": scale_init_raw,
    }
    write_container(path, arrays, {"grid_resolution": int(grid_resolution), "frame": int(frame)})


def load_params(path) -> tuple[AvatarParams, np.ndarray, dict]:
    """Returns (params, cached raw scale init, header metadata)."""
    arrays, meta = read_container(path)
    missing = [name for name in _PARAM_ARRAYS if name not in arrays]
    if missing:
        raise ValueError(f"{path}: snapshot is missing array '{missing[0]}'")
    params = AvatarParams(
        vertex_offsets=arrays["vertex_offsets"].astype(np.float64),
        pose=RigidPose(
            arrays["pose_rotation"].astype(np.float64),
            arrays["pose_translation"].astype(np.float64),
        ),
        delta_pos=arrays["delta_pos"].astype(np.float64),
        delta_rot=arrays["delta_rot"].astype(np.float64),
        delta_scale=arrays["delta_scale"].astype(np.float64),
        opacity_raw=arrays["opacity_raw"].astype(np.float64),
        color_raw=arrays["color_raw"].astype(np.float64),
    )
    return params, arrays["scale_init_raw"].astype(np.float64), meta
