"""Per-frame pose tracking against the map's target Gaussians and keyframe selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cloud import Frame, PointCloud, knn_covariances, reproject_depth, voxel_downsample
from .errors import TrackingLostError
from .gaussian_map import MapSnapshot
from .geometry import PoseSE3
from .gicp import (CorrespondenceReport, GicpConfig, align, compose_covariances,
                   decompose_covariances, regularize_scales)

log = logging.getLogger(__name__)


class KeyframeKind(str, Enum):
    NONE = "none"
    TRACKING = "tracking_keyframe"
    MAPPING_ONLY = "mapping_only"


@dataclass
class FrontendConfig:
    stride: int = 2
    voxel_size: float | None = None
    z_min: float = 0.1
    z_max: float = 10.0
    knn: int = 20


@dataclass
class TrackingConfig:
    kf_ratio_threshold: float = 0.9
    corr_dist_threshold: float | None = None  # None -> gicp.max_corr_dist
    max_kf_gap: int = 30  # force a tracking keyframe after this many frames
    mapping_only_every: int = 10  # 0 disables mapping-only keyframes
    promote_mapping_only: bool = False  # ablation: the periodic frames become tracking keyframes
    gicp: GicpConfig = field(default_factory=GicpConfig)

    @property
    def ratio_dist(self) -> float:
        d = self.gicp.max_corr_dist if self.corr_dist_threshold is None else self.corr_dist_threshold
        # the ratio is read off the registration report, which holds pairs up to max_corr_dist
        return min(d, self.gicp.max_corr_dist)


@dataclass
class SourceGaussians:
    """Camera-frame cloud with its k-NN covariance decomposition."""

    cloud: PointCloud
    axes: np.ndarray
    scales: np.ndarray  # raw standard deviations, descending
    low_support: bool = False

    def __len__(self):
        return len(self.cloud)

    def covariances(self, mode: str = "none", plane_eps: float = 1e-3) -> np.ndarray:
        reg, _ = regularize_scales(self.scales, mode, plane_eps)
        return compose_covariances(self.axes, reg)


@dataclass
class TrackResult:
    pose: PoseSE3
    report: CorrespondenceReport | None
    corr_ratio: float
    lost: bool


@dataclass
class KeyframeRecord:
    index: int
    pose: PoseSE3
    kind: KeyframeKind
    color: np.ndarray | None = None  # at rendering resolution
    depth: np.ndarray | None = None
    intrinsics: object = None
    source: SourceGaussians | None = None


def build_source(frame: Frame, cfg: FrontendConfig | None = None) -> SourceGaussians:
    cfg = cfg or FrontendConfig()
    cloud = reproject_depth(frame, cfg.stride, cfg.z_min, cfg.z_max)
    if cfg.voxel_size:
        cloud = voxel_downsample(cloud, cfg.voxel_size)
    covs = knn_covariances(cloud, cfg.knn)
    axes, scales = decompose_covariances(covs.covariances)
    return SourceGaussians(cloud, axes, scales, covs.low_support)


def track_frame(source: SourceGaussians, snapshot: MapSnapshot, prior: PoseSE3,
                cfg: TrackingConfig | None = None) -> TrackResult:
    """Register the camera-frame source against the target snapshot, starting at ``prior``.

    The returned pose is camera-to-world. An empty snapshot bootstraps at ``prior``.
    """
    cfg = cfg or TrackingConfig()
    if snapshot.empty:
        return TrackResult(prior, None, 0.0, False)
    g = cfg.gicp
    src_covs = source.covariances(g.mode, g.plane_eps)
    tgt_covs = snapshot.regularized_covariances(g.mode, g.plane_eps)
    try:
        pose, report = align(source.cloud.points, src_covs, snapshot.index, tgt_covs, prior, g)
    except TrackingLostError as exc:
        log.warning("tracking lost: %s", exc)
        return TrackResult(prior, None, 0.0, True)
    ratio = float(np.count_nonzero(report.distances <= cfg.ratio_dist)) / len(source)
    return TrackResult(pose, report, ratio, False)


def select_keyframe(corr_ratio: float, frames_since_tracking_kf: int, frame_index: int,
                    cfg: TrackingConfig | None = None) -> KeyframeKind:
    cfg = cfg or TrackingConfig()
    if frame_index == 0:
        return KeyframeKind.TRACKING
    if corr_ratio < cfg.kf_ratio_threshold or frames_since_tracking_kf >= cfg.max_kf_gap:
        return KeyframeKind.TRACKING
    if cfg.mapping_only_every and frame_index % cfg.mapping_only_every == 0:
        return KeyframeKind.TRACKING if cfg.promote_mapping_only else KeyframeKind.MAPPING_ONLY
    return KeyframeKind.NONE


def constant_velocity_prior(poses: list[PoseSE3], origin: PoseSE3 | None = None) -> PoseSE3:
    if not poses:
        return origin or PoseSE3.identity()
    if len(poses) == 1:
        return poses[-1]
    a, b = poses[-2], poses[-1]
    return b @ (a.inverse() @ b)


class Tracker:
    """Tracking lane state: pose history, keyframe counters and lost-frame bookkeeping."""

    def __init__(self, frontend: FrontendConfig | None = None, cfg: TrackingConfig | None = None,
                 origin: PoseSE3 | None = None):
        self.frontend = frontend or FrontendConfig()
        self.cfg = cfg or TrackingConfig()
        self.origin = origin or PoseSE3.identity()
        self.poses: list[PoseSE3] = []
        self.since_kf = 0
        self.lost_frames = 0
        self.results: list[TrackResult] = []

    def step(self, frame: Frame, snapshot: MapSnapshot):
        """Track one frame; returns ``(TrackResult, KeyframeKind, SourceGaussians)``."""
        source = build_source(frame, self.frontend)
        prior = constant_velocity_prior(self.poses, self.origin)
        result = track_frame(source, snapshot, prior, self.cfg)
        if result.lost:
            self.lost_frames += 1
            kind = KeyframeKind.NONE
        else:
            kind = select_keyframe(result.corr_ratio, self.since_kf, len(self.poses), self.cfg)
        self.since_kf = 0 if kind is KeyframeKind.TRACKING else self.since_kf + 1
        self.poses.append(result.pose)
        self.results.append(result)
        return result, kind, source
