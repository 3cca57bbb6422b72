"""CPU splat rasterizer with analytic gradients.

Gaussians are projected with the EWA approximation, sorted globally by view depth,
and alpha-composited front to back per pixel. The backward pass walks each pixel's
contribution list back to front and chains through the projection by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .cloud import Intrinsics
from .gaussian_map import GaussianSet, sigmoid
from .geometry import PoseSE3, quat_to_rotmat, quat_to_rotmat_jacobian

LOWPASS = 0.3  # px^2 added to the projected covariance diagonal
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
NEAR = 0.2
FAR = 100.0
GUARD_BAND = 1.3  # means beyond this multiple of the half field of view are dropped


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_z: float
    color: np.ndarray
    opacity: float


@dataclass
class RenderedFrame:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-normalized expected depth
    alpha: np.ndarray  # (H, W)


@dataclass
class Projection:
    """Per-visible-splat quantities; ``ids`` index the source GaussianSet."""

    ids: np.ndarray
    mean2d: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse 2D covariance
    cov2d: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    bbox: np.ndarray  # (N, 4) int: x0, x1, y0, y1 inclusive
    # kept for the backward pass
    t_cam: np.ndarray
    Tm: np.ndarray  # J @ W, (N, 2, 3)
    cov3d: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    quat_unit: np.ndarray
    quat_norm: np.ndarray


@dataclass
class RenderState:
    """Forward-pass bookkeeping needed by :func:`render_backward`."""

    proj: Projection
    order: np.ndarray  # visible splats sorted by depth
    pix_start: np.ndarray
    pix_list: np.ndarray
    n_contrib: np.ndarray
    t_final: np.ndarray
    frame: RenderedFrame
    width: int
    height: int
    n_total: int


@dataclass
class Gradients:
    means: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray

    def as_dict(self) -> dict:
        return dict(means=self.means, rotations=self.rotations, log_scales=self.log_scales,
                    colors=self.colors, opacity_logits=self.opacity_logits)


def _empty_projection():
    z = np.zeros
    return Projection(z(0, dtype=np.int64), z((0, 2)), z((0, 3)), z((0, 2, 2)), z(0), z(0), z((0, 3)),
                      z((0, 4), dtype=np.int64), z((0, 3)), z((0, 2, 3)), z((0, 3, 3)), z((0, 3, 3)),
                      z((0, 3)), z((0, 4)), z(0))


def project_gaussians(g: GaussianSet, world_to_camera: PoseSE3, K: Intrinsics, width: int,
                      height: int, cull: bool = True) -> Projection:
    """EWA projection of every primitive; near/far/footprint culled ones are dropped."""
    n = len(g)
    if n == 0:
        return _empty_projection()
    W = world_to_camera.R
    t_cam = g.means @ W.T + world_to_camera.t
    z = t_cam[:, 2]
    opacity = sigmoid(g.opacity_logits)
    # a splat whose peak alpha is below the skip threshold can never contribute
    r2 = 2.0 * np.log(np.maximum(255.0 * np.minimum(opacity, ALPHA_MAX), 1e-300))
    # off-axis points close to the image plane have an unbounded projection Jacobian; drop them
    lim_x = GUARD_BAND * max(K.cx + 0.5, width - 0.5 - K.cx) / K.fx
    lim_y = GUARD_BAND * max(K.cy + 0.5, height - 0.5 - K.cy) / K.fy
    with np.errstate(divide="ignore", invalid="ignore"):
        in_band = (np.abs(t_cam[:, 0]) <= lim_x * z) & (np.abs(t_cam[:, 1]) <= lim_y * z)
    keep = (z > NEAR) & (z <= FAR) & (r2 > 0) & in_band
    ids = np.nonzero(keep)[0]
    t_cam, z, r2 = t_cam[ids], z[ids], r2[ids]
    qn = np.linalg.norm(g.rotations[ids], axis=1)
    qu = g.rotations[ids] / qn[:, None]
    R = quat_to_rotmat(qu)
    s = np.exp(g.log_scales[ids])
    M = R * s[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)
    x, y = t_cam[:, 0], t_cam[:, 1]
    J = np.zeros((len(ids), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z**2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z**2
    Tm = J @ W
    cov2d = Tm @ cov3d @ np.swapaxes(Tm, 1, 2)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)
    # bounding box of the ellipse where alpha >= ALPHA_MIN
    hx = np.sqrt(r2 * cov2d[:, 0, 0])
    hy = np.sqrt(r2 * cov2d[:, 1, 1])
    bbox = np.stack([np.ceil(mean2d[:, 0] - hx), np.floor(mean2d[:, 0] + hx),
                     np.ceil(mean2d[:, 1] - hy), np.floor(mean2d[:, 1] + hy)], axis=1)
    bbox = np.nan_to_num(bbox, nan=-1.0, posinf=1e9, neginf=-1e9).clip(-1e9, 1e9).astype(np.int64)
    if cull:
        inside = (bbox[:, 1] >= 0) & (bbox[:, 0] <= width - 1) & (bbox[:, 3] >= 0) & (bbox[:, 2] <= height - 1)
    else:
        inside = np.ones(len(ids), dtype=bool)
    sel = np.nonzero(inside)[0]
    return Projection(ids[sel], mean2d[sel], conic[sel], cov2d[sel], z[sel], opacity[ids][sel],
                      g.colors[ids][sel], bbox[sel], t_cam[sel], Tm[sel], cov3d[sel], R[sel],
                      s[sel], qu[sel], qn[sel])


def project_gaussian(mean, rotation, log_scale, color, opacity_logit, world_to_camera: PoseSE3,
                     K: Intrinsics, width: int | None = None, height: int | None = None):
    """Project one primitive; returns ``None`` when it is culled."""
    g = GaussianSet(np.asarray(mean, float).reshape(1, 3), np.asarray(rotation, float).reshape(1, 4),
                    np.asarray(log_scale, float).reshape(1, 3), np.asarray(color, float).reshape(1, 3),
                    np.asarray([opacity_logit], float), np.ones(1, bool))
    p = project_gaussians(g, world_to_camera, K, width or K.width, height or K.height)
    if len(p.ids) == 0:
        return None
    return Splat2D(p.mean2d[0], p.cov2d[0], float(p.depth[0]), p.color[0], float(p.opacity[0]))


@numba.njit(cache=True, inline="always")
def _alpha(conic, mean2d, opacity, i, px, py):
    dx = px - mean2d[i, 0]
    dy = py - mean2d[i, 1]
    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
    if power > 0.0:
        return 0.0
    return min(ALPHA_MAX, opacity[i] * np.exp(power))


@numba.njit(cache=True)
def _build_lists(order, bbox, conic, mean2d, opacity, width, height):
    npix = width * height
    counts = np.zeros(npix + 1, dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        x0 = max(bbox[i, 0], 0)
        x1 = min(bbox[i, 1], width - 1)
        y0 = max(bbox[i, 2], 0)
        y1 = min(bbox[i, 3], height - 1)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                if _alpha(conic, mean2d, opacity, i, px, py) >= ALPHA_MIN:
                    counts[py * width + px + 1] += 1
    for p in range(npix):
        counts[p + 1] += counts[p]
    fill = counts[:-1].copy()
    lst = np.empty(counts[npix], dtype=np.int64)
    for k in range(order.shape[0]):
        i = order[k]
        x0 = max(bbox[i, 0], 0)
        x1 = min(bbox[i, 1], width - 1)
        y0 = max(bbox[i, 2], 0)
        y1 = min(bbox[i, 3], height - 1)
        for py in range(y0, y1 + 1):
            for px in range(x0, x1 + 1):
                if _alpha(conic, mean2d, opacity, i, px, py) >= ALPHA_MIN:
                    p = py * width + px
                    lst[fill[p]] = i
                    fill[p] += 1
    return counts, lst


@numba.njit(cache=True)
def _composite(pix_start, pix_list, conic, mean2d, opacity, color, depth, width, height):
    rgb = np.zeros((height, width, 3))
    dep = np.zeros((height, width))
    acc = np.zeros((height, width))
    t_final = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for py in range(height):
        for px in range(width):
            p = py * width + px
            T = 1.0
            zsum = 0.0
            used = 0
            for e in range(pix_start[p], pix_start[p + 1]):
                i = pix_list[e]
                a = _alpha(conic, mean2d, opacity, i, px, py)
                test_T = T * (1.0 - a)
                if test_T < T_MIN:
                    break
                w = a * T
                for ch in range(3):
                    rgb[py, px, ch] += color[i, ch] * w
                zsum += depth[i] * w
                T = test_T
                used += 1
            n_contrib[py, px] = used
            t_final[py, px] = T
            acc[py, px] = 1.0 - T
            if used > 0 and acc[py, px] > 0.0:
                dep[py, px] = zsum / acc[py, px]
    return rgb, dep, acc, t_final, n_contrib


@numba.njit(cache=True)
def _backward_pixels(pix_start, pix_list, n_contrib, t_final, depth_img, conic, mean2d, opacity,
                     color, depth, g_rgb, g_depth, width, height):
    n = mean2d.shape[0]
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opacity = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_depth = np.zeros(n)
    for py in range(height):
        for px in range(width):
            p = py * width + px
            used = n_contrib[py, px]
            if used == 0:
                continue
            T = t_final[py, px]
            W = 1.0 - T
            D = depth_img[py, px]
            gr0 = g_rgb[py, px, 0]
            gr1 = g_rgb[py, px, 1]
            gr2 = g_rgb[py, px, 2]
            gd = g_depth[py, px]
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            sz = 0.0
            for e in range(pix_start[p] + used - 1, pix_start[p] - 1, -1):
                i = pix_list[e]
                dx = px - mean2d[i, 0]
                dy = py - mean2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                gauss = np.exp(power)
                raw = opacity[i] * gauss
                a = min(ALPHA_MAX, raw)
                T = T / (1.0 - a)  # transmittance in front of splat i
                w = a * T
                d_color[i, 0] += w * gr0
                d_color[i, 1] += w * gr1
                d_color[i, 2] += w * gr2
                zh = 0.0
                if W > 0.0:
                    zh = (depth[i] - D) / W
                    d_depth[i] += gd * w / W
                dL_da = T * ((color[i, 0] - s0) * gr0 + (color[i, 1] - s1) * gr1
                             + (color[i, 2] - s2) * gr2 + (zh - sz) * gd)
                s0 = color[i, 0] * a + (1.0 - a) * s0
                s1 = color[i, 1] * a + (1.0 - a) * s1
                s2 = color[i, 2] * a + (1.0 - a) * s2
                sz = zh * a + (1.0 - a) * sz
                if raw >= ALPHA_MAX:
                    continue
                d_opacity[i] += dL_da * gauss
                dL_dpow = dL_da * a
                d_mean2d[i, 0] += dL_dpow * (conic[i, 0] * dx + conic[i, 1] * dy)
                d_mean2d[i, 1] += dL_dpow * (conic[i, 1] * dx + conic[i, 2] * dy)
                d_conic[i, 0] += -0.5 * dL_dpow * dx * dx
                d_conic[i, 1] += -dL_dpow * dx * dy
                d_conic[i, 2] += -0.5 * dL_dpow * dy * dy
    return d_mean2d, d_conic, d_opacity, d_color, d_depth


def render(g: GaussianSet, pose: PoseSE3, K: Intrinsics, width: int | None = None,
           height: int | None = None, cull: bool = True, return_state: bool = False):
    """Render RGB, expected depth and accumulated alpha from camera-to-world ``pose``."""
    width = int(width or K.width)
    height = int(height or K.height)
    proj = project_gaussians(g, pose.inverse(), K, width, height, cull=cull)
    order = np.lexsort((proj.ids, proj.depth)).astype(np.int64)
    pix_start, pix_list = _build_lists(order, proj.bbox, proj.conic, proj.mean2d, proj.opacity,
                                       width, height)
    rgb, dep, acc, t_final, n_contrib = _composite(pix_start, pix_list, proj.conic, proj.mean2d,
                                                   proj.opacity, proj.color, proj.depth, width, height)
    frame = RenderedFrame(rgb, dep, acc)
    if not return_state:
        return frame
    return frame, RenderState(proj, order, pix_start, pix_list, n_contrib, t_final, frame,
                              width, height, len(g))


def render_backward(state: RenderState, K: Intrinsics, world_to_camera: PoseSE3, g_rgb,
                    g_depth=None) -> Gradients:
    """Gradients of ``sum(g_rgb * rgb) + sum(g_depth * depth)`` w.r.t. all map parameters."""
    proj = state.proj
    n_all = state.n_total
    out = Gradients(np.zeros((n_all, 3)), np.zeros((n_all, 4)), np.zeros((n_all, 3)),
                    np.zeros((n_all, 3)), np.zeros(n_all))
    if len(proj.ids) == 0:
        return out
    g_rgb = np.ascontiguousarray(g_rgb, dtype=float)
    if g_depth is None:
        g_depth = np.zeros((state.height, state.width))
    g_depth = np.ascontiguousarray(g_depth, dtype=float)
    d_m2, d_con, d_op, d_col, d_z = _backward_pixels(
        state.pix_start, state.pix_list, state.n_contrib, state.t_final, state.frame.depth,
        proj.conic, proj.mean2d, proj.opacity, proj.color, proj.depth, g_rgb, g_depth,
        state.width, state.height)

    # conic -> 2D covariance: d cov = -conic * G * conic with G the symmetric matrix gradient
    G = np.empty((len(proj.ids), 2, 2))
    G[:, 0, 0] = d_con[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * d_con[:, 1]
    G[:, 1, 1] = d_con[:, 2]
    Ci = np.empty_like(G)
    Ci[:, 0, 0] = proj.conic[:, 0]
    Ci[:, 0, 1] = Ci[:, 1, 0] = proj.conic[:, 1]
    Ci[:, 1, 1] = proj.conic[:, 2]
    Gc = -Ci @ G @ Ci

    Tm, cov3d = proj.Tm, proj.cov3d
    W = world_to_camera.R
    dSigma = np.swapaxes(Tm, 1, 2) @ Gc @ Tm
    dTm = 2.0 * Gc @ Tm @ cov3d
    dJ = dTm @ W.T
    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], proj.t_cam[:, 2]
    fx, fy = K.fx, K.fy
    dt = np.zeros((len(proj.ids), 3))
    dt[:, 0] = dJ[:, 0, 2] * (-fx / z**2) + d_m2[:, 0] * fx / z
    dt[:, 1] = dJ[:, 1, 2] * (-fy / z**2) + d_m2[:, 1] * fy / z
    dt[:, 2] = (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 1, 1] * (-fy / z**2)
                + dJ[:, 0, 2] * (2 * fx * x / z**3) + dJ[:, 1, 2] * (2 * fy * y / z**3)
                - d_m2[:, 0] * fx * x / z**2 - d_m2[:, 1] * fy * y / z**2 + d_z)
    d_mean = dt @ W

    s = proj.scales
    M = proj.R * s[:, None, :]
    dM = 2.0 * dSigma @ M
    d_s = np.einsum("nij,nij->nj", proj.R, dM)
    dR = dM * s[:, None, :]
    dq_unit = np.einsum("nab,nabk->nk", dR, quat_to_rotmat_jacobian(proj.quat_unit))
    qu = proj.quat_unit
    dq = (dq_unit - qu * np.sum(qu * dq_unit, axis=1, keepdims=True)) / proj.quat_norm[:, None]

    ids = proj.ids
    out.means[ids] = d_mean
    out.rotations[ids] = dq
    out.log_scales[ids] = d_s * s
    out.colors[ids] = d_col
    out.opacity_logits[ids] = d_op * proj.opacity * (1.0 - proj.opacity)
    return out


def transmittance_residual(state: RenderState) -> np.ndarray:
    """Per-pixel ``sum(alpha_i T_i) + T_final - 1`` recomputed from the contribution lists."""
    proj = state.proj
    return _energy(state.pix_start, state.pix_list, state.n_contrib, state.t_final, proj.conic,
                   proj.mean2d, proj.opacity, state.width, state.height)


@numba.njit(cache=True)
def _energy(pix_start, pix_list, n_contrib, t_final, conic, mean2d, opacity, width, height):
    out = np.zeros((height, width))
    for py in range(height):
        for px in range(width):
            p = py * width + px
            T = 1.0
            total = 0.0
            for e in range(pix_start[p], pix_start[p] + n_contrib[py, px]):
                a = _alpha(conic, mean2d, opacity, pix_list[e], px, py)
                total += a * T
                T *= 1.0 - a
            out[py, px] = total + t_final[py, px] - 1.0
    return out
