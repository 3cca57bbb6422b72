"""Generalized-ICP: covariance decomposition/regularization and SE(3) registration."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cloud import EIG_FLOOR, SpatialIndex
from .errors import TrackingLostError
from .geometry import PoseSE3, hat

log = logging.getLogger(__name__)

SCALE_FLOOR = float(np.sqrt(EIG_FLOOR))
REG_MODES = ("none", "plane", "ellipse")


@dataclass(frozen=True)
class CovDecomposition:
    """``C = axes @ diag(scales)**2 @ axes.T`` with scales in descending order."""

    axes: np.ndarray
    scales: np.ndarray

    def covariance(self) -> np.ndarray:
        return (self.axes * self.scales**2) @ self.axes.T


@dataclass
class GicpConfig:
    max_corr_dist: float = 0.5
    min_pairs: int = 50
    max_iters: int = 30
    tol: float = 1e-6
    mode: str = "ellipse"
    plane_eps: float = 1e-3
    max_halvings: int = 12


@dataclass
class CorrespondenceReport:
    pairs: np.ndarray  # (P, 2) source index, target index
    residuals: np.ndarray  # (P, 3) target - T source
    distances: np.ndarray  # (P,) Euclidean residual norms
    cost: float
    inlier_count: int
    iterations: int = 0
    status: str = "converged"  # or "max-iters"


def _check_symmetric(C, tol=1e-9):
    C = np.asarray(C, dtype=float)
    asym = np.abs(C - np.swapaxes(C, -1, -2)).max(axis=(-1, -2))
    scale = np.maximum(np.abs(C).max(axis=(-1, -2)), 1.0)
    if np.any(asym > tol * scale):
        raise ValueError(f"covariance not symmetric (max asymmetry {asym.max():.3e})")


def decompose_covariances(covs, floor: float = EIG_FLOOR):
    """Batched decomposition; returns ``(axes (N,3,3), scales (N,3))``, scales descending."""
    covs = np.asarray(covs, dtype=float)
    _check_symmetric(covs)
    w, V = np.linalg.eigh(0.5 * (covs + np.swapaxes(covs, -1, -2)))
    w = np.maximum(w[..., ::-1], floor)
    V = V[..., ::-1].copy()
    flip = np.linalg.det(V) < 0
    V[flip, :, 2] *= -1
    return V, np.sqrt(w)


def decompose_covariance(C, floor: float = EIG_FLOOR) -> CovDecomposition:
    C = np.asarray(C, dtype=float)
    if C.shape != (3, 3):
        raise ValueError(f"expected a 3x3 matrix, got {C.shape}")
    axes, scales = decompose_covariances(C[None], floor)
    return CovDecomposition(axes[0], scales[0])


def compose_covariances(axes, scales) -> np.ndarray:
    return (axes * (scales**2)[..., None, :]) @ np.swapaxes(axes, -1, -2)


def regularize_scales(scales, mode: str, plane_eps: float = 1e-3):
    """Regularized scale triples plus a mask of fully degenerate inputs."""
    scales = np.asarray(scales, dtype=float)
    if mode not in REG_MODES:
        raise ValueError(f"unknown regularization mode {mode!r}")
    degenerate = np.zeros(scales.shape[:-1], dtype=bool)
    if mode == "none":
        return scales.copy(), degenerate
    plane = np.broadcast_to(np.array([1.0, 1.0, plane_eps]), scales.shape).copy()
    if mode == "plane":
        return plane, degenerate
    median = scales[..., 1]
    degenerate = median <= SCALE_FLOOR * (1.0 + 1e-9)
    out = scales / np.where(degenerate, 1.0, median)[..., None]
    out[degenerate] = plane[degenerate]
    return out, degenerate


def regularize_covariances(covs, mode: str, plane_eps: float = 1e-3):
    """Batched regularization; returns ``(covariances, degenerate_mask)``."""
    covs = np.asarray(covs, dtype=float)
    if mode == "none":
        return covs.copy(), np.zeros(covs.shape[:-2], dtype=bool)
    axes, scales = decompose_covariances(covs)
    reg, degenerate = regularize_scales(scales, mode, plane_eps)
    return compose_covariances(axes, reg), degenerate


def regularize_covariance(C, mode: str = "ellipse", plane_eps: float = 1e-3) -> np.ndarray:
    out, degenerate = regularize_covariances(np.asarray(C, dtype=float)[None], mode, plane_eps)
    if degenerate[0]:
        log.debug("degenerate covariance replaced by plane regularization")
    return out[0]


def _safe_cholesky(mats):
    try:
        return np.linalg.cholesky(mats)
    except np.linalg.LinAlgError:
        for i, m in enumerate(mats):
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise np.linalg.LinAlgError(f"fused covariance of pair {i} is singular "
                                            "or not positive definite") from None
        raise


def mle_cost(residuals, fused_covs) -> float:
    """Sum of squared Mahalanobis norms ``d_i^T fused_i^{-1} d_i``."""
    d = np.asarray(residuals, dtype=float).reshape(-1, 3)
    C = np.asarray(fused_covs, dtype=float).reshape(-1, 3, 3)
    if len(d) == 0:
        return 0.0
    L = _safe_cholesky(C)
    y = np.linalg.solve(L, d[..., None])[..., 0]
    return float(np.sum(y * y))


def _information(Ct, Cs, R):
    fused = Ct + R @ Cs @ R.T
    _safe_cholesky(fused)
    return np.linalg.inv(fused)


def _weighted_cost(d, info):
    return float(np.einsum("ni,nij,nj->", d, info, d))


def align(source_points, source_covs, target_index: SpatialIndex, target_covs,
          init: PoseSE3 | None = None, cfg: GicpConfig | None = None):
    """Estimate the pose mapping source into the target frame.

    Covariances are expected to be regularized already. Returns ``(pose, report)``.
    Raises :class:`TrackingLostError` when fewer than ``cfg.min_pairs`` pairs survive.
    """
    cfg = cfg or GicpConfig()
    T = init if init is not None else PoseSE3.identity()
    xs = np.asarray(source_points, dtype=float).reshape(-1, 3)
    Cs = np.asarray(source_covs, dtype=float)
    Ct_all = np.asarray(target_covs, dtype=float)
    xt_all = target_index.points
    if len(xs) == 0 or len(xt_all) == 0:
        raise TrackingLostError("empty source or target", pose=T, n_pairs=0)

    last_step = np.inf
    iteration = 0
    status = "max-iters"
    while True:
        q = T.apply(xs)
        dist, idx = target_index.nearest(q)
        keep = np.nonzero(dist <= cfg.max_corr_dist)[0]
        if len(keep) < cfg.min_pairs:
            raise TrackingLostError(f"{len(keep)} correspondences (< {cfg.min_pairs})",
                                    pose=T, n_pairs=len(keep))
        tgt = idx[keep]
        d = xt_all[tgt] - q[keep]
        info = _information(Ct_all[tgt], Cs[keep], T.R)
        cost = _weighted_cost(d, info)
        if last_step < cfg.tol:
            status = "converged"
            break
        if iteration >= cfg.max_iters:
            break
        iteration += 1

        # d(xi) = d - [I, -hat(q)] xi for the left update exp(xi) T
        J = np.zeros((len(keep), 3, 6))
        J[:, :, :3] = -np.eye(3)
        J[:, :, 3:] = hat(q[keep])
        JtO = np.einsum("nki,nkj->nij", J, info)
        H = np.einsum("nik,nkj->ij", JtO, J)
        b = np.einsum("nik,nk->i", JtO, d)
        try:
            xi = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            xi = -np.linalg.lstsq(H, b, rcond=None)[0]
        if not np.all(np.isfinite(xi)):
            log.warning("non-finite Gauss-Newton step; keeping the last pose")
            break

        accepted = False
        for _ in range(cfg.max_halvings):
            cand = PoseSE3.exp(xi) @ T
            d_new = xt_all[tgt] - cand.apply(xs[keep])
            if _weighted_cost(d_new, info) <= cost:
                accepted = True
                break
            xi = 0.5 * xi
        if accepted:
            T = cand
            last_step = float(np.linalg.norm(xi))
        else:
            last_step = 0.0

    pairs = np.stack([keep, tgt], axis=1)
    dn = np.linalg.norm(d, axis=1)
    report = CorrespondenceReport(pairs=pairs, residuals=d, distances=dn, cost=cost,
                                  inlier_count=int(len(keep)), iterations=iteration, status=status)
    return T, report
