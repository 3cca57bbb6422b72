"""Rigid-body helpers: SO(3)/SE(3) exponential maps, quaternions, and the pose type."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation


def hat(w):
    """Skew-symmetric matrix of a 3-vector (batched over leading axes)."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w):
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        # second-order Taylor keeps R orthonormal to ~1e-16 at this range
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * vee
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        i = int(np.argmax(axis))
        axis = B[i] / axis[i]
        axis /= np.linalg.norm(axis)
        if np.dot(axis, vee) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * vee


def se3_exp(xi):
    """Exponential of a twist ``xi = (v, w)``; returns ``(R, t)``."""
    xi = np.asarray(xi, dtype=float)
    v, w = xi[:3], xi[3:]
    theta = np.linalg.norm(w)
    K = hat(w)
    R = so3_exp(w)
    if theta < 1e-8:
        V = np.eye(3) + 0.5 * K + K @ K / 6.0
    else:
        V = (np.eye(3) + (1.0 - np.cos(theta)) / theta**2 * K
             + (theta - np.sin(theta)) / theta**3 * K @ K)
    return R, V @ v


def quat_to_rotmat(q):
    """Rotation matrices from quaternions stored ``(w, x, y, z)``; batched, normalizes."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Quaternions ``(w, x, y, z)`` with ``w >= 0`` from rotation matrices (batched)."""
    R = np.asarray(R, dtype=float)
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q[q[:, 0] < 0] *= -1
    return q.reshape(R.shape[:-2] + (4,))


def quat_to_rotmat_jacobian(q):
    """d R / d q for unit quaternions ``(w, x, y, z)``; returns shape (..., 3, 3, 4).

    The derivative is of the polynomial map, i.e. it assumes ``q`` already normalized.
    """
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    J = np.zeros(q.shape[:-1] + (3, 3, 4))
    # R00 = 1 - 2(y^2 + z^2)
    J[..., 0, 0, 2] = -4 * y
    J[..., 0, 0, 3] = -4 * z
    # R01 = 2(xy - wz)
    J[..., 0, 1, 0] = -2 * z
    J[..., 0, 1, 1] = 2 * y
    J[..., 0, 1, 2] = 2 * x
    J[..., 0, 1, 3] = -2 * w
    # R02 = 2(xz + wy)
    J[..., 0, 2, 0] = 2 * y
    J[..., 0, 2, 1] = 2 * z
    J[..., 0, 2, 2] = 2 * w
    J[..., 0, 2, 3] = 2 * x
    # R10 = 2(xy + wz)
    J[..., 1, 0, 0] = 2 * z
    J[..., 1, 0, 1] = 2 * y
    J[..., 1, 0, 2] = 2 * x
    J[..., 1, 0, 3] = 2 * w
    # R11 = 1 - 2(x^2 + z^2)
    J[..., 1, 1, 1] = -4 * x
    J[..., 1, 1, 3] = -4 * z
    # R12 = 2(yz - wx)
    J[..., 1, 2, 0] = -2 * x
    J[..., 1, 2, 1] = -2 * w
    J[..., 1, 2, 2] = 2 * z
    J[..., 1, 2, 3] = 2 * y
    # R20 = 2(xz - wy)
    J[..., 2, 0, 0] = -2 * y
    J[..., 2, 0, 1] = 2 * z
    J[..., 2, 0, 2] = -2 * w
    J[..., 2, 0, 3] = 2 * x
    # R21 = 2(yz + wx)
    J[..., 2, 1, 0] = 2 * x
    J[..., 2, 1, 1] = 2 * w
    J[..., 2, 1, 2] = 2 * z
    J[..., 2, 1, 3] = 2 * y
    # R22 = 1 - 2(x^2 + y^2)
    J[..., 2, 2, 1] = -4 * x
    J[..., 2, 2, 2] = -4 * y
    return J


def orthonormalize(R):
    U, _, Vt = np.linalg.svd(R)
    M = U @ Vt
    if np.linalg.det(M) < 0:
        U[:, -1] *= -1
        M = U @ Vt
    return M


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform ``x -> R x + t``.

    Camera poses are stored camera-to-world throughout the package.
    """

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.array(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> PoseSE3:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> PoseSE3:
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quat(cls, q_wxyz, t) -> PoseSE3:
        return cls(quat_to_rotmat(q_wxyz), t)

    @classmethod
    def exp(cls, xi) -> PoseSE3:
        R, t = se3_exp(xi)
        return cls(R, t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def quat(self) -> np.ndarray:
        """Unit quaternion ``(w, x, y, z)`` with nonnegative ``w``."""
        return rotmat_to_quat(self.R)

    def inverse(self) -> PoseSE3:
        Rt = self.R.T
        return PoseSE3(Rt, -Rt @ self.t)

    def __matmul__(self, other: PoseSE3) -> PoseSE3:
        # re-project onto SO(3): chained products (e.g. velocity extrapolation) otherwise
        # amplify rounding until R is visibly non-orthonormal
        return PoseSE3(orthonormalize(self.R @ other.R), self.R @ other.t + self.t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.R.T + self.t

    def rotate_cov(self, covs) -> np.ndarray:
        return self.R @ np.asarray(covs, dtype=float) @ self.R.T

    def log(self) -> np.ndarray:
        w = so3_log(self.R)
        theta = np.linalg.norm(w)
        K = hat(w)
        if theta < 1e-8:
            Vinv = np.eye(3) - 0.5 * K + K @ K / 12.0
        else:
            half = 0.5 * theta
            Vinv = (np.eye(3) - 0.5 * K
                    + (1.0 - half * np.cos(half) / np.sin(half)) / theta**2 * K @ K)
        return np.concatenate([Vinv @ self.t, w])


def rotation_angle(R) -> float:
    R = np.asarray(R, dtype=float)
    sin = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(sin, 0.5 * (np.trace(R) - 1.0)))


def pose_error(a: PoseSE3, b: PoseSE3) -> tuple[float, float]:
    """(rotation error in radians, translation error in meters) between two poses."""
    return rotation_angle(a.R.T @ b.R), float(np.linalg.norm(a.t - b.t))
