"""Image buffers and file I/O (PNG, raw float dumps)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .snapshot import read_container, write_container


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major float RGB(A) raster in [0, 1]."""

    array: np.ndarray  # (H, W, C) float64, C in {3, 4}

    def __post_init__(self):
        arr = np.asarray(self.array, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] not in (3, 4):
            raise ValueError("image array must be (H, W, 3) or (H, W, 4)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "array", arr)

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def channels(self) -> int:
        return self.array.shape[2]


def to_uint8(img: ImageBuffer) -> np.ndarray:
    """Quantize linear [0,1] to 8-bit with round-half-up."""
    return np.floor(np.clip(img.array, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: ImageBuffer) -> None:
    data = to_uint8(img)
    mode = "RGBA" if img.channels == 4 else "RGB"
    Image.fromarray(data, mode=mode).save(path, format="PNG")


def read_png(path) -> ImageBuffer:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA" if im.mode == "RGBA" else "RGB"), dtype=np.float64)
    return ImageBuffer(arr / 255.0)


def write_raw(path, img: ImageBuffer) -> None:
    """Float dump for exact comparisons (same container format as snapshots)."""
    write_container(path, {"image": img.array}, {"kind": "image"})


def read_raw(path) -> ImageBuffer:
    arrays, _ = read_container(path)
    if "image" not in arrays:
        raise ValueError(f"{path}: container holds no 'image' array")
    return ImageBuffer(arrays["image"].astype(np.float64))
