"""The single Gaussian map shared by tracking (as G-ICP targets) and mapping (as splats)."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .cloud import SpatialIndex
from .geometry import PoseSE3, quat_to_rotmat, rotmat_to_quat
from .gicp import CovDecomposition, REG_MODES, compose_covariances, regularize_scales

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
MIN_SCALE = 1e-6
SCALE_INIT_MODES = ("aligned", "constant", "raw", "naive")


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class MapConfig:
    init_opacity: float = 0.7
    scale_exponent: float = 1.5  # p in scale / z**p
    scale_base: float = 1.0  # meters; multiplies the regularized, depth-aligned scales
    scale_init: str = "aligned"  # aligned | constant | raw | naive
    constant_depth: float = 2.0  # depth used by scale_init="constant"
    overlap_dist: float = 0.5
    scene_extent: float = 10.0
    prune_opacity: float = 0.05
    prune_aniso: float = 60.0
    prune_abs_scale: float | None = None  # None -> 10% of scene_extent
    init_aniso_max: float | None = 20.0  # cap on max/min scale for aligned/constant init

    def __post_init__(self):
        if self.scale_init not in SCALE_INIT_MODES:
            raise ValueError(f"unknown scale_init {self.scale_init!r}")
        if self.scale_exponent < 0:
            raise ValueError("scale_exponent must be nonnegative")

    @property
    def abs_scale_limit(self) -> float:
        if self.prune_abs_scale is not None:
            return self.prune_abs_scale
        return 0.1 * self.scene_extent


PARAM_NAMES = ("means", "rotations", "log_scales", "colors", "opacity_logits")


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian parameters.

    ``rotations`` are unit quaternions ``(w, x, y, z)``; scales are stored as logs and
    opacities as logits. ``is_target`` marks primitives that serve as registration
    targets (inserted from tracking keyframes).
    """

    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    rotations: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    is_target: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.means)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_rotmat(self.rotations) if len(self) else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        return compose_covariances(self.rotation_matrices(), self.scales)

    def copy(self) -> GaussianSet:
        return GaussianSet(*(np.array(getattr(self, n)) for n in PARAM_NAMES + ("is_target",)))

    def subset(self, idx) -> GaussianSet:
        return GaussianSet(*(getattr(self, n)[idx] for n in PARAM_NAMES + ("is_target",)))

    def params(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}


@dataclass(frozen=True)
class MapSnapshot:
    """Immutable view of (a subset of) the map, with a spatial index over the means."""

    means: np.ndarray
    covariances: np.ndarray
    index: SpatialIndex
    version: int
    map_ids: np.ndarray  # rows of the full map each entry came from
    _axes: np.ndarray = field(repr=False, default=None)
    _scales: np.ndarray = field(repr=False, default=None)

    @property
    def empty(self) -> bool:
        return len(self.means) == 0

    def __len__(self):
        return len(self.means)

    def regularized_covariances(self, mode: str, plane_eps: float = 1e-3) -> np.ndarray:
        """Regularize straight from the stored rotation/scale parameters (no eigensolve)."""
        if mode == "none" or self.empty:
            return self.covariances
        order = np.argsort(-self._scales, axis=1, kind="stable")
        scales = np.take_along_axis(self._scales, order, axis=1)
        axes = np.take_along_axis(self._axes, order[:, None, :], axis=2)
        reg, _ = regularize_scales(scales, mode, plane_eps)
        return compose_covariances(axes, reg)


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def scale_align(decomp: CovDecomposition, z: float, p: float = 1.5) -> CovDecomposition:
    """Divide the scales of a regularized decomposition by ``z**p``."""
    if not z > 0:
        raise ValueError(f"depth must be positive, got {z}")
    return CovDecomposition(decomp.axes, decomp.scales / z**p)


def scale_align_batch(scales, z, p: float = 1.5) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if np.any(~(z > 0)):
        raise ValueError("depths must be positive")
    return np.asarray(scales, dtype=float) / (z**p)[:, None]


def overlap_filter(world_means, snapshot: MapSnapshot, dist_threshold: float) -> np.ndarray:
    """True where a point has no map mean within ``dist_threshold`` (i.e. is insertable)."""
    world_means = np.asarray(world_means, dtype=float).reshape(-1, 3)
    if snapshot.empty:
        return np.ones(len(world_means), dtype=bool)
    dist, _ = snapshot.index.nearest(world_means)
    return dist > dist_threshold


def naive_scales(points) -> np.ndarray:
    """Isotropic scales from the mean squared distance to the 3 nearest other points."""
    points = np.asarray(points, dtype=float)
    n = len(points)
    if n < 2:
        return np.full((n, 3), 0.01)
    dist, _ = SpatialIndex(points).knn(points, min(4, n))
    d2 = np.mean(dist[:, 1:] ** 2, axis=1)
    s = np.sqrt(np.maximum(d2, 1e-7))
    return np.repeat(s[:, None], 3, axis=1)


class GaussianMap:
    """Single-writer / snapshot-reader parameter store.

    Per-primitive auxiliary arrays registered in ``extras`` (optimizer moments) follow
    every insertion (zero-filled) and pruning.
    """

    def __init__(self, cfg: MapConfig | None = None):
        self.cfg = cfg or MapConfig()
        self.gaussians = GaussianSet()
        self.extras: dict[str, np.ndarray] = {}
        self.version = 0
        self.lock = threading.RLock()
        self._snap_cache: dict[bool, MapSnapshot] = {}

    def __len__(self):
        return len(self.gaussians)

    def bump(self):
        with self.lock:
            self.version += 1
            self._snap_cache.clear()

    def register_extra(self, name: str, tail_shape=()):
        with self.lock:
            if name not in self.extras:
                self.extras[name] = np.zeros((len(self),) + tuple(tail_shape))
            return self.extras[name]

    # -- readers -------------------------------------------------------------------------
    def snapshot(self, target_only: bool = False) -> MapSnapshot:
        """Immutable view; ``target_only`` restricts to registration targets."""
        with self.lock:
            cached = self._snap_cache.get(target_only)
            if cached is not None and cached.version == self.version:
                return cached
            g = self.gaussians
            ids = np.nonzero(g.is_target)[0] if target_only else np.arange(len(g))
            axes = quat_to_rotmat(g.rotations[ids]) if len(ids) else np.zeros((0, 3, 3))
            scales = np.exp(g.log_scales[ids])
            covs = compose_covariances(axes, scales)
            means = np.array(g.means[ids])
            snap = MapSnapshot(_freeze(means), _freeze(covs), SpatialIndex(means), self.version,
                               _freeze(ids), _freeze(axes), _freeze(scales))
            self._snap_cache[target_only] = snap
            return snap

    # -- writers -------------------------------------------------------------------------
    def initial_scales(self, cam_points, axes, scales):
        """Per-point (axes, scales) in the camera frame for the configured init mode.

        ``scales`` are the raw (unregularized) k-NN standard deviations.
        """
        cfg = self.cfg
        mode = cfg.scale_init
        if mode == "raw":
            return axes, scales
        if mode == "naive":
            return np.broadcast_to(np.eye(3), axes.shape).copy(), naive_scales(cam_points)
        reg, _ = regularize_scales(scales, "ellipse")
        if cfg.init_aniso_max is not None:
            # keep fresh primitives clear of the anisotropy prune: thin axes are raised
            reg = np.maximum(reg, reg[:, :1] / cfg.init_aniso_max)
        if mode == "constant":
            z = np.full(len(cam_points), cfg.constant_depth)
        else:
            z = cam_points[:, 2]
        return axes, cfg.scale_base * scale_align_batch(reg, z, cfg.scale_exponent)

    def insert(self, cam_points, colors, axes, scales, pose: PoseSE3, *, target: bool = True,
               overlap_against: str = "auto", overlap_dist: float | None = None) -> int:
        """Insert camera-frame Gaussians (``axes``/``scales`` already initialized) at ``pose``.

        Points within ``overlap_dist`` of existing means are skipped. ``overlap_against``
        selects the reference set: ``"target"``, ``"all"``, or ``"auto"`` (targets for target
        insertions, the whole map otherwise).
        """
        cam_points = np.asarray(cam_points, dtype=float).reshape(-1, 3)
        world = pose.apply(cam_points)
        dist = self.cfg.overlap_dist if overlap_dist is None else overlap_dist
        with self.lock:
            if overlap_against == "auto":
                overlap_against = "target" if target else "all"
            snap = self.snapshot(target_only=(overlap_against == "target"))
            mask = overlap_filter(world, snap, dist)
            n = int(mask.sum())
            if n == 0:
                return 0
            R_world = pose.R @ np.asarray(axes, dtype=float)[mask]
            s = np.clip(np.asarray(scales, dtype=float)[mask], MIN_SCALE, self.cfg.scene_extent)
            g = self.gaussians
            g.means = np.concatenate([g.means, world[mask]])
            g.rotations = np.concatenate([g.rotations, rotmat_to_quat(R_world)])
            g.log_scales = np.concatenate([g.log_scales, np.log(s)])
            g.colors = np.concatenate([g.colors, np.clip(np.asarray(colors, dtype=float)[mask], 0, 1)])
            g.opacity_logits = np.concatenate([g.opacity_logits,
                                               np.full(n, float(logit(self.cfg.init_opacity)))])
            g.is_target = np.concatenate([g.is_target, np.full(n, bool(target))])
            for name, arr in self.extras.items():
                self.extras[name] = np.concatenate([arr, np.zeros((n,) + arr.shape[1:])])
            self.bump()
            return n

    def insert_keyframe(self, cam_points, colors, raw_covs_axes, raw_scales, pose: PoseSE3, *,
                        target: bool = True) -> int:
        axes, scales = self.initial_scales(cam_points, raw_covs_axes, raw_scales)
        return self.insert(cam_points, colors, axes, scales, pose, target=target)

    def remove(self, keep_mask) -> int:
        keep_mask = np.asarray(keep_mask, dtype=bool)
        with self.lock:
            removed = int((~keep_mask).sum())
            if removed == 0:
                return 0
            self.gaussians = self.gaussians.subset(keep_mask)
            for name in self.extras:
                self.extras[name] = self.extras[name][keep_mask]
            self.bump()
            return removed

    def prune_mask(self) -> np.ndarray:
        """True for primitives that should be removed."""
        g = self.gaussians
        if len(g) == 0:
            return np.zeros(0, dtype=bool)
        s = g.scales
        aniso = s.max(axis=1) / s.min(axis=1)
        return ((g.opacities < self.cfg.prune_opacity) | (aniso > self.cfg.prune_aniso)
                | (s.max(axis=1) > self.cfg.abs_scale_limit))

    def prune(self) -> int:
        with self.lock:
            return self.remove(~self.prune_mask())

    # -- persistence ---------------------------------------------------------------------
    def save(self, path):
        """Write a checkpoint (``.npz``): the five parameter arrays, target flags and version."""
        with self.lock:
            g = self.gaussians
            np.savez(path, format=CHECKPOINT_FORMAT, version=self.version, means=g.means,
                     rotations=g.rotations, log_scales=g.log_scales, colors=g.colors,
                     opacity_logits=g.opacity_logits, is_target=g.is_target)

    @classmethod
    def load(cls, path, cfg: MapConfig | None = None) -> GaussianMap:
        with np.load(path) as z:
            fmt = int(z["format"])
            if fmt != CHECKPOINT_FORMAT:
                raise ValueError(f"unsupported checkpoint format {fmt}")
            m = cls(cfg)
            m.gaussians = GaussianSet(*(np.array(z[n]) for n in PARAM_NAMES + ("is_target",)))
            m.version = int(z["version"])
        return m


def prune(gmap: GaussianMap) -> int:
    return gmap.prune()


def insert_keyframe(gmap: GaussianMap, cam_points, colors, covariances, pose: PoseSE3,
                    *, target: bool = True) -> int:
    """Decompose camera-frame k-NN covariances, initialize scales per config and insert."""
    from .gicp import decompose_covariances

    axes, scales = decompose_covariances(covariances)
    return gmap.insert_keyframe(cam_points, colors, axes, scales, pose, target=target)


__all__ = ["GaussianMap", "GaussianSet", "MapConfig", "MapSnapshot", "overlap_filter",
           "scale_align", "scale_align_batch", "insert_keyframe", "prune", "naive_scales",
           "logit", "sigmoid", "REG_MODES"]
