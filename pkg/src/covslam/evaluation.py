"""Trajectories in TUM text format, ATE RMSE and PSNR."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import PoseSE3, quat_to_rotmat, rotmat_to_quat

PSNR_IDENTICAL = math.inf  # returned by psnr() for identical images


def canonical_quat_xyzw(q):
    q = np.array(q, dtype=float).reshape(-1, 4)
    q[q[:, 3] < 0] *= -1
    return q


@dataclass
class Trajectory:
    """Timestamped poses; rotations kept as canonical ``(x, y, z, w)`` quaternions, ``w >= 0``."""

    stamps: np.ndarray
    translations: np.ndarray
    quats: np.ndarray

    def __post_init__(self):
        self.stamps = np.asarray(self.stamps, dtype=float).reshape(-1)
        self.translations = np.asarray(self.translations, dtype=float).reshape(-1, 3)
        self.quats = canonical_quat_xyzw(self.quats)
        if not (len(self.stamps) == len(self.translations) == len(self.quats)):
            raise ValueError("stamps, translations and quaternions differ in length")
        if np.any(np.diff(self.stamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, stamps, poses) -> Trajectory:
        poses = list(poses)
        if not poses:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
        R = np.stack([p.R for p in poses])
        wxyz = rotmat_to_quat(R)
        return cls(stamps, np.stack([p.t for p in poses]), np.roll(wxyz, -1, axis=1))

    def __len__(self):
        return len(self.stamps)

    @property
    def poses(self) -> list[PoseSE3]:
        R = quat_to_rotmat(np.roll(self.quats, 1, axis=1)) if len(self) else []
        return [PoseSE3(r, t) for r, t in zip(R, self.translations)]

    def __iter__(self):
        return iter(zip(self.stamps, self.poses))


def _fmt(x: float) -> str:
    x = float(x)
    if x == 0.0:
        return "0"
    r = repr(x)
    return r[:-2] if r.endswith(".0") else r


def write_trajectory(traj: Trajectory, path) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line, shortest round-trip float text."""
    lines = []
    for s, t, q in zip(traj.stamps, traj.translations, traj.quats):
        lines.append(" ".join(_fmt(v) for v in (s, *t, *q)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path) -> Trajectory:
    stamps, ts, qs = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        stamps.append(vals[0])
        ts.append(vals[1:4])
        qs.append(vals[4:8])
    return Trajectory(np.array(stamps), np.array(ts).reshape(-1, 3), np.array(qs).reshape(-1, 4))


def associate(a, b, max_dt: float):
    """Greedy one-to-one nearest-timestamp matching; returns index pairs sorted by ``a``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        return []
    cands = []
    j = np.searchsorted(b, a)
    for i, ai in enumerate(a):
        for jj in range(max(j[i] - 2, 0), min(j[i] + 2, len(b))):
            d = abs(ai - b[jj])
            if d <= max_dt:
                cands.append((d, i, jj))
    cands.sort()
    used_a, used_b, out = set(), set(), []
    for _, i, jj in cands:
        if i in used_a or jj in used_b:
            continue
        used_a.add(i)
        used_b.add(jj)
        out.append((i, jj))
    return sorted(out)


def rigid_align(src, dst):
    """Rotation and translation minimizing ``sum |R src + t - dst|^2`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


def ate_rmse(est: Trajectory, gt: Trajectory, align: bool = True, max_dt: float = 0.02) -> float:
    """Root-mean-square translational error in centimeters."""
    pairs = associate(est.stamps, gt.stamps, max_dt)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 matched poses, got {len(pairs)}")
    i, j = np.array(pairs).T
    pe, pg = est.translations[i], gt.translations[j]
    if align:
        R, t = rigid_align(pe, pg)
        pe = pe @ R.T + t
    return float(np.sqrt(np.mean(np.sum((pe - pg) ** 2, axis=1))) * 100.0)


def psnr(img, gt) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``inf`` for identical inputs."""
    img = np.asarray(img, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if img.shape != gt.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {gt.shape}")
    mse = float(np.mean((img - gt) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)
