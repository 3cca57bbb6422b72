"""Analytic RGBD generator: a textured box room with box and sphere props.

Depth is exact (closed-form ray intersection); poses are exact. Texture depends only on
the texture seed, geometry only on the room/prop description.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cloud import Frame, Intrinsics
from .datasets import DatasetStream
from .evaluation import Trajectory
from .geometry import PoseSE3

log = logging.getLogger(__name__)


def default_props():
    """Fixed ring of props: floor boxes, floating spheres and wall-mounted boxes.

    Spaced so every outward view holds several non-parallel surfaces and a curved one.
    """
    props = []
    n = 16
    for k in range(n):
        th = 2 * np.pi * k / n + 0.1
        c, s = np.cos(th), np.sin(th)
        if k % 2 == 0:
            r = 1.9 + 0.25 * (k % 3)
            size = 0.18 + 0.06 * (k % 4)
            top = 1.5 - (0.4 + 0.25 * (k % 5))
            cx, cz = r * c, r * s
            props.append(("box", (cx - size, top, cz - size), (cx + size, 1.5, cz + size)))
        else:
            r = 1.5 + 0.3 * (k % 3)
            props.append(("sphere", (r * c, 0.6 - 0.35 * (k % 4), r * s), 0.16 + 0.05 * (k % 3)))
    # shelves sticking out of the four walls at different heights
    for (x0, z0, x1, z1), y in [((-1.2, 2.2, -0.4, 2.5), -0.2), ((0.6, -2.5, 1.4, -2.15), 0.1),
                                ((2.65, -0.9, 3.0, -0.1), -0.4), ((-3.0, 0.5, -2.6, 1.3), 0.3)]:
        props.append(("box", (x0, y - 0.15, z0), (x1, y + 0.15, z1)))
    return props


@dataclass
class SceneSpec:
    room_min: tuple = (-3.0, -1.5, -2.5)
    room_max: tuple = (3.0, 1.5, 2.5)  # y points down: floor at room_max[1]
    props: list = field(default_factory=default_props)
    texture_seed: int = 0
    width: int = 160
    height: int = 120
    fx: float = 100.0
    fy: float = 100.0
    path: str = "orbit"  # orbit | line | static
    n_frames: int = 200
    orbit_radius: float = 0.6
    orbit_degrees: float = 360.0
    line_length: float = 0.5
    depth_noise: float = 0.0  # std of depth noise at 1 m; grows with z^2
    color_noise: float = 0.0
    noise_seed: int = 0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
                          self.width, self.height)


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> PoseSE3:
    """Camera-to-world pose with OpenCV axes (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return PoseSE3(np.stack([right, down, fwd], axis=1), eye)


def camera_path(spec: SceneSpec) -> list[PoseSE3]:
    n = spec.n_frames
    center = 0.5 * (np.asarray(spec.room_min) + np.asarray(spec.room_max))
    center[1] -= 0.2
    if spec.path == "static":
        return [PoseSE3.identity() for _ in range(n)]
    if spec.path == "line":
        poses = []
        for i in range(n):
            s = spec.line_length * i / max(n - 1, 1)
            eye = center + np.array([s - 0.5 * spec.line_length, 0.0, -0.3])
            poses.append(look_at(eye, eye + np.array([0.3, 0.25, 1.0])))
        return poses
    if spec.path == "orbit":
        poses = []
        for i in range(n):
            th = np.deg2rad(spec.orbit_degrees) * i / n
            off = np.array([np.cos(th), 0.0, np.sin(th)])
            eye = center + spec.orbit_radius * off
            # look outward and slightly down, swaying the pitch so the floor is seen
            tgt = eye + off * 2.0 + np.array([0.0, 0.6 + 0.25 * np.sin(3 * th), 0.0])
            poses.append(look_at(eye, tgt))
        return poses
    raise ValueError(f"unknown camera path {spec.path!r}")


class _Texture:
    def __init__(self, seed: int, n_surfaces: int):
        rng = np.random.default_rng(seed)
        self.base = rng.uniform(0.2, 0.8, size=(n_surfaces, 3))
        k = 4
        wavelength = rng.uniform(0.5, 1.6, size=(n_surfaces, k))
        direc = rng.normal(size=(n_surfaces, k, 3))
        direc /= np.linalg.norm(direc, axis=2, keepdims=True)
        self.omega = direc * (2 * np.pi / wavelength)[..., None]
        self.phase = rng.uniform(0, 2 * np.pi, size=(n_surfaces, k))
        self.amp = rng.uniform(0.05, 0.15, size=(n_surfaces, k, 3))

    def __call__(self, points, surface):
        w = self.omega[surface]  # (N, k, 3)
        arg = np.einsum("nkj,nj->nk", w, points) + self.phase[surface]
        col = self.base[surface] + np.einsum("nk,nkc->nc", np.sin(arg), self.amp[surface])
        return np.clip(col, 0.0, 1.0)


def raycast(spec: SceneSpec, pose: PoseSE3):
    """Return (depth HxW, surface id HxW, world hit points HxWx3) for camera-to-world ``pose``."""
    K = spec.intrinsics()
    v, u = np.mgrid[0:spec.height, 0:spec.width].astype(float)
    dirs_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)
    d = dirs_cam.reshape(-1, 3) @ pose.R.T  # world directions with unit camera-z
    o = pose.t
    lo, hi = np.asarray(spec.room_min, float), np.asarray(spec.room_max, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_axis = np.where(d > 0, (hi - o) / d, np.where(d < 0, (lo - o) / d, np.inf))
    t_best = t_axis.min(axis=1)
    axis = t_axis.argmin(axis=1)
    side = np.where(d[np.arange(len(d)), axis] > 0, 1, 0)
    surface = 2 * axis + side  # room walls are surfaces 0..5
    for n, prop in enumerate(spec.props):
        sid = 6 + n
        if prop[0] == "box":
            bmin, bmax = np.asarray(prop[1], float), np.asarray(prop[2], float)
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (bmin - o) / d
                t2 = (bmax - o) / d
            tnear = np.nanmax(np.minimum(t1, t2), axis=1)
            tfar = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tnear <= tfar) & (tnear > 1e-9)
        else:
            c, r = np.asarray(prop[1], float), float(prop[2])
            oc = o - c
            a = np.sum(d * d, axis=1)
            b = 2 * d @ oc
            cc = oc @ oc - r * r
            disc = b * b - 4 * a * cc
            with np.errstate(invalid="ignore"):
                tnear = (-b - np.sqrt(disc)) / (2 * a)
            hit = (disc >= 0) & (tnear > 1e-9)
        closer = hit & (tnear < t_best)
        t_best = np.where(closer, tnear, t_best)
        surface = np.where(closer, sid, surface)
    pts = o + d * t_best[:, None]
    shape = (spec.height, spec.width)
    return t_best.reshape(shape), surface.reshape(shape), pts.reshape(shape + (3,))


@dataclass
class SyntheticDataset(DatasetStream):
    spec: SceneSpec = None
    poses: list = None
    degenerate_path: bool = False


def synth_scene(spec: SceneSpec | None = None) -> SyntheticDataset:
    """Build an in-memory dataset; frames are rendered on access."""
    spec = spec or SceneSpec()
    poses = camera_path(spec)
    texture = _Texture(spec.texture_seed, 6 + len(spec.props))
    K = spec.intrinsics()
    degenerate = len(poses) > 1 and all(
        np.allclose(p.matrix(), poses[0].matrix()) for p in poses[1:])
    if degenerate:
        log.warning("synthetic camera path has zero motion")

    def make(i):
        def load():
            depth, surf, pts = raycast(spec, poses[i])
            color = texture(pts.reshape(-1, 3), surf.reshape(-1)).reshape(depth.shape + (3,))
            if spec.depth_noise > 0 or spec.color_noise > 0:
                rng = np.random.default_rng([spec.noise_seed, i])
                depth = depth + rng.normal(size=depth.shape) * spec.depth_noise * depth**2
                color = np.clip(color + rng.normal(size=color.shape) * spec.color_noise, 0, 1)
            return Frame(color, depth, K, i, float(i))
        return load

    stamps = np.arange(len(poses), dtype=float)
    return SyntheticDataset([make(i) for i in range(len(poses))], K,
                            Trajectory.from_poses(stamps, poses), stamps, "synthetic",
                            spec=spec, poses=poses, degenerate_path=degenerate)
