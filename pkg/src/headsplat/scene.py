"""Scene configuration and camera/supervision file parsing.

Paths inside a config are resolved relative to the config file's directory.
Serialization round-trips: parse -> to_dict -> parse yields an equal config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .fitting import FitConfig
from .losses import LossWeights
from .snapshot import read_container


class ConfigError(ValueError):
    """Invalid or inconsistent scene configuration."""


def load_camera_file(path):
    """Load a camera JSON; returns a Camera or a list (orbit scripts)."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        return [_camera_from_dict(d, path) for d in data]
    return _camera_from_dict(data, path)


def _camera_from_dict(data: dict, path) -> Camera:
    try:
        w2c = np.asarray(data["world_to_camera"], dtype=np.float64).reshape(4, 4)
        return Camera(
            width=int(data["width"]), height=int(data["height"]),
            fx=float(data["fx"]), fy=float(data["fy"]),
            cx=float(data["cx"]), cy=float(data["cy"]),
            rotation=w2c[:3, :3], translation=w2c[:3, 3],
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: bad camera record ({exc})") from exc


@dataclass
class SceneConfig:
    """Everything a fit or render run needs, as written in the config file."""

    template_obj: str
    landmark_indices: list[int]
    uv_resolution: int
    cameras: list[str]
    frames: list[dict]
    tracked_vertices: str | None = None
    rigid_landmarks: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    fit: FitConfig = field(default_factory=FitConfig)
    base_dir: Path = field(default_factory=Path, compare=False)

    def __post_init__(self):
        if self.uv_resolution < 2:
            raise ConfigError("uv_resolution must be >= 2")
        if not self.cameras:
            raise ConfigError("config lists no cameras")
        for f, frame in enumerate(self.frames):
            targets = frame.get("targets", [])
            if len(targets) != len(self.cameras):
                raise ConfigError(f"frame {f} lists {len(targets)} targets for {len(self.cameras)} cameras")

    def resolve(self, rel: str) -> Path:
        return (self.base_dir / rel).resolve()

    def to_dict(self) -> dict:
        d = {
            "template_obj": self.template_obj,
            "landmark_indices": list(self.landmark_indices),
            "uv_resolution": self.uv_resolution,
            "cameras": list(self.cameras),
            "frames": [dict(f) for f in self.frames],
            "loss_weights": asdict(self.loss_weights),
            "fit": _fit_to_dict(self.fit),
        }
        if self.tracked_vertices is not None:
            d["tracked_vertices"] = self.tracked_vertices
        if self.rigid_landmarks is not None:
            d["rigid_landmarks"] = self.rigid_landmarks
        return d


def _fit_to_dict(fit: FitConfig) -> dict:
    return {
        "iterations": fit.iterations,
        "learning_rates": dict(fit.learning_rates),
        "optimize_groups": list(fit.optimize_groups) if fit.optimize_groups is not None else None,
        "cameras_per_step": fit.cameras_per_step,
        "snapshot_every": fit.snapshot_every,
        "seed": fit.seed,
        "tile_size": fit.tile_size,
        "threads": fit.threads,
        "lr_decay_target": fit.lr_decay_target,
        "background": list(fit.background) if fit.background is not None else None,
    }


def _fit_from_dict(data: dict, weights: LossWeights) -> FitConfig:
    groups = data.get("optimize_groups")
    background = data.get("background")
    return FitConfig(
        iterations=int(data.get("iterations", 200)),
        learning_rates={k: float(v) for k, v in data.get("learning_rates", {}).items()},
        loss_weights=weights,
        optimize_groups=tuple(groups) if groups is not None else None,
        cameras_per_step=int(data.get("cameras_per_step", 0)),
        snapshot_every=int(data.get("snapshot_every", 0)),
        seed=int(data.get("seed", 0)),
        tile_size=int(data.get("tile_size", 16)),
        threads=int(data.get("threads", 1)),
        lr_decay_target=(float(data["lr_decay_target"])
                         if data.get("lr_decay_target") is not None else None),
        background=tuple(background) if background is not None else None,
    )


def load_scene_config(path, check_files: bool = True) -> SceneConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse config ({exc})") from exc

    try:
        weights = LossWeights(**data.get("loss_weights", {}))
        cfg = SceneConfig(
            template_obj=data["template_obj"],
            landmark_indices=[int(i) for i in data.get("landmark_indices", [])],
            uv_resolution=int(data["uv_resolution"]),
            cameras=list(data["cameras"]),
            frames=[dict(f) for f in data.get("frames", [])],
            tracked_vertices=data.get("tracked_vertices"),
            rigid_landmarks=data.get("rigid_landmarks"),
            loss_weights=weights,
            fit=_fit_from_dict(data.get("fit", {}), weights),
            base_dir=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: bad config ({exc})") from exc

    if check_files:
        referenced = [cfg.template_obj, *cfg.cameras]
        for frame in cfg.frames:
            referenced.extend(frame.get("targets", []))
        if cfg.tracked_vertices:
            referenced.append(cfg.tracked_vertices)
        if cfg.rigid_landmarks:
            referenced.append(cfg.rigid_landmarks)
        for rel in referenced:
            p = cfg.resolve(rel)
            if not p.exists():
                raise ConfigError(f"{path}: referenced file does not exist: {rel}")
    return cfg


def save_scene_config(path, cfg: SceneConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")


def load_tracked_vertices(path, frame: int) -> np.ndarray:
    """Tracked mesh vertices for one frame: per-frame arrays or a shared 'vertices'."""
    arrays, _ = read_container(path)
    key = f"frame_{frame:04d}"
    if key in arrays:
        return arrays[key].astype(np.float64)
    if "vertices" in arrays:
        return arrays["vertices"].astype(np.float64)
    raise ConfigError(f"{path}: no '{key}' or 'vertices' array")


def load_reference_landmarks(path, frame: int) -> np.ndarray:
    arrays, _ = read_container(path)
    key = f"frame_{frame:04d}"
    if key in arrays:
        return arrays[key].astype(np.float64)
    if "landmarks" in arrays:
        return arrays["landmarks"].astype(np.float64)
    raise ConfigError(f"{path}: no '{key}' or 'landmarks' array")
