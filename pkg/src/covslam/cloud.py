"""Depth frame to point cloud, voxel filtering, k-NN covariances and the spatial index."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateFrameError

EIG_FLOOR = 1e-6  # m^2


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: float) -> Intrinsics:
        """Intrinsics for an image resized by ``factor`` with pixel-center sampling."""
        w = int(round(self.width * factor))
        h = int(round(self.height * factor))
        return Intrinsics(self.fx * factor, self.fy * factor,
                          (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5, w, h)

    def project(self, points) -> np.ndarray:
        """Pinhole projection of camera-frame points to pixel coordinates (u, v)."""
        p = np.asarray(points, dtype=float)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx,
                         self.fy * p[..., 1] / p[..., 2] + self.cy], axis=-1)


@dataclass
class Frame:
    """One RGBD observation; ``color`` is HxWx3 in [0, 1], ``depth`` HxW in meters."""

    color: np.ndarray
    depth: np.ndarray
    intrinsics: Intrinsics
    index: int = 0
    timestamp: float = 0.0


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3) camera frame unless stated otherwise
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if len(self.points) != len(self.colors):
            raise ValueError("points and colors must have equal length")

    def __len__(self):
        return len(self.points)


@dataclass
class CovarianceSet:
    covariances: np.ndarray  # (N, 3, 3)
    low_support: bool = False

    def __len__(self):
        return len(self.covariances)


class SpatialIndex:
    """Immutable nearest-neighbour index over a fixed point array.

    Queries return neighbours sorted by distance, ties broken by lower index.
    """

    _TIE_MARGIN = 4

    def __init__(self, points):
        self.points = np.ascontiguousarray(np.asarray(points, dtype=float).reshape(-1, 3))
        self.points.setflags(write=False)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self):
        return len(self.points)

    def knn(self, queries, k: int):
        """Return ``(dist, idx)`` of shape (M, min(k, size))."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        n = len(self.points)
        k = min(int(k), n)
        if k == 0 or len(queries) == 0:
            return np.zeros((len(queries), 0)), np.zeros((len(queries), 0), dtype=np.int64)
        kq = min(k + self._TIE_MARGIN, n)
        dist, idx = self._tree.query(queries, k=kq)
        dist = np.asarray(dist).reshape(len(queries), kq)
        idx = np.asarray(idx, dtype=np.int64).reshape(len(queries), kq)
        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)
        if kq > k:
            # a tie running past the fetched margin needs the exhaustive answer
            bad = np.nonzero(dist[:, k - 1] == dist[:, -1])[0]
            for r in bad:
                d_all = np.linalg.norm(self.points - queries[r], axis=1)
                o = np.lexsort((np.arange(n), d_all))[:kq]
                dist[r], idx[r] = d_all[o], o
        return dist[:, :k], idx[:, :k]

    def nearest(self, queries):
        """Nearest neighbour ``(dist, idx)``; distance is ``inf`` and index -1 for an empty index."""
        queries = np.asarray(queries, dtype=float).reshape(-1, 3)
        if self._tree is None:
            return np.full(len(queries), np.inf), np.full(len(queries), -1, dtype=np.int64)
        dist, idx = self.knn(queries, 1)
        return dist[:, 0], idx[:, 0]


def reproject_depth(frame: Frame, stride: int = 4, z_min: float = 0.1, z_max: float = 10.0) -> PointCloud:
    """Back-project every ``stride``-th pixel with valid depth into the camera frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    depth = np.asarray(frame.depth, dtype=float)
    color = np.asarray(frame.color, dtype=float)
    if depth.ndim != 2 or color.shape[:2] != depth.shape:
        raise ValueError(f"color {color.shape} and depth {depth.shape} dimensions differ")
    K = frame.intrinsics
    v, u = np.mgrid[0:depth.shape[0]:stride, 0:depth.shape[1]:stride]
    d = depth[v, u]
    ok = np.isfinite(d) & (d >= z_min) & (d <= z_max)
    u, v, d = u[ok].astype(float), v[ok].astype(float), d[ok]
    if d.size == 0:
        raise DegenerateFrameError(f"frame {frame.index}: no valid depth in [{z_min}, {z_max}]")
    pts = np.stack([(u - K.cx) * d / K.fx, (v - K.cy) * d / K.fy, d], axis=1)
    cols = color[v.astype(int), u.astype(int)]
    if cols.ndim == 1:
        cols = np.repeat(cols[:, None], 3, axis=1)
    return PointCloud(pts, cols[:, :3])


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    m = len(counts)
    pts = np.zeros((m, 3))
    cols = np.zeros((m, 3))
    np.add.at(pts, inverse, cloud.points)
    np.add.at(cols, inverse, cloud.colors)
    return PointCloud(pts / counts[:, None], cols / counts[:, None])


def floor_covariances(covs, floor: float = EIG_FLOOR) -> np.ndarray:
    """Symmetrize and clamp eigenvalues of a stack of 3x3 matrices to ``floor``."""
    covs = np.asarray(covs, dtype=float)
    sym = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    w, V = np.linalg.eigh(sym)
    w = np.maximum(w, floor)
    out = (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def knn_covariances(cloud: PointCloud | np.ndarray, k: int = 20, index: SpatialIndex | None = None,
                    floor: float = EIG_FLOOR) -> CovarianceSet:
    """Covariance of the ``k`` nearest neighbours (self included) of every point."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        raise ValueError("knn_covariances needs a non-empty cloud")
    if index is None:
        index = SpatialIndex(pts)
    low = len(pts) < k
    _, idx = index.knn(pts, k)
    nb = pts[idx]  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / nb.shape[1]
    return CovarianceSet(floor_covariances(cov, floor), low_support=low)
