"""Nested run configuration, loaded from YAML with unknown keys rejected.

Schema (all keys optional, defaults shown by ``SlamConfig()``)::

    dataset:  {path, format: synth|tum|replica, depth_scale, intrinsics: [fx, fy, cx, cy, w, h],
               synth: {<SceneSpec fields>}}
    frontend: {stride, voxel_size, z_min, z_max, knn}
    tracking: {kf_ratio_threshold, corr_dist_threshold, max_kf_gap, mapping_only_every,
               promote_mapping_only,
               gicp: {max_corr_dist, min_pairs, max_iters, tol, mode, plane_eps, max_halvings}}
    map:      {init_opacity, scale_exponent, scale_base, scale_init, constant_depth,
               overlap_dist, scene_extent, prune_opacity, prune_aniso, prune_abs_scale,
               init_aniso_max}
    mapping:  {iters_per_frame, keyframe_choice, prune, prune_every, prune_warmup,
               weights: {lambda_I1, lambda_I2, lambda_D}, optimizer: {lr_means, ...}}
    render_scale, mode: deterministic|free_running, fps_cap, seed, max_lost_frames,
    max_frames, eval_every, auto_extent, mapping_enabled, out
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .gaussian_map import MapConfig
from .gicp import REG_MODES, GicpConfig
from .mapping import MappingConfig
from .synth import SceneSpec
from .tracking import FrontendConfig, TrackingConfig

MODES = ("deterministic", "free_running")
FORMATS = ("synth", "tum", "replica")


@dataclass
class DatasetConfig:
    path: str | None = None
    format: str = "synth"
    depth_scale: float | None = None
    intrinsics: list | None = None
    synth: SceneSpec = field(default_factory=SceneSpec)


def _default_tracking():
    return TrackingConfig(corr_dist_threshold=0.05, gicp=GicpConfig(max_corr_dist=0.2))


def _default_map():
    return MapConfig(scale_base=0.03, overlap_dist=0.03)


@dataclass
class SlamConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    tracking: TrackingConfig = field(default_factory=_default_tracking)
    map: MapConfig = field(default_factory=_default_map)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    render_scale: float = 0.5
    mode: str = "deterministic"
    fps_cap: float | None = None
    seed: int = 0
    max_lost_frames: int = 10
    max_frames: int | None = None
    eval_every: int = 5
    auto_extent: bool = True
    mapping_enabled: bool = True
    out: str | None = None

    def validate(self) -> SlamConfig:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dataset.format not in FORMATS:
            raise ValueError(f"dataset.format must be one of {FORMATS}")
        if self.tracking.gicp.mode not in REG_MODES:
            raise ValueError(f"tracking.gicp.mode must be one of {REG_MODES}")
        if not self.map.scale_exponent > 0 and self.map.scale_init == "aligned":
            raise ValueError("map.scale_exponent must be > 0")
        if not 0 < self.render_scale <= 1 or abs(1 / self.render_scale - round(1 / self.render_scale)) > 1e-9:
            raise ValueError("render_scale must be 1/n for a positive integer n")
        if self.fps_cap is not None and self.fps_cap <= 0:
            raise ValueError("fps_cap must be positive")
        return self


def _merge(obj, data, where: str):
    if data is None:
        return obj
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected a mapping")
    fields = {f.name for f in dataclasses.fields(obj)}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = getattr(obj, name)
        if dataclasses.is_dataclass(sub) and not isinstance(sub, type):
            kwargs[name] = _merge(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return dataclasses.replace(obj, **kwargs)


def config_from_dict(data: dict | None) -> SlamConfig:
    return _merge(SlamConfig(), data or {}, "config").validate()


def load_config(path) -> SlamConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    return config_from_dict(data)


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
