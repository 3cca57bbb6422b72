"""Structural similarity with an 11x11 Gaussian window, plus its gradient."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW = 11
SIGMA = 1.5
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def _kernel():
    x = np.arange(WINDOW) - WINDOW // 2
    k = np.exp(-(x**2) / (2 * SIGMA**2))
    return k / k.sum()


_K1D = _kernel()


def _blur(img):
    out = correlate1d(img, _K1D, axis=0, mode="constant")
    return correlate1d(out, _K1D, axis=1, mode="constant")


def _valid(img):
    r = WINDOW // 2
    return img[r:-r, r:-r]


def _pad_valid(img):
    r = WINDOW // 2
    return np.pad(img, r)


def _as_stack(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        return a[..., None]
    if a.ndim == 3:
        return a
    raise ValueError(f"expected an HxW or HxWxC image, got shape {a.shape}")


def ssim(a, b, return_grad: bool = False):
    """Mean SSIM over full windows and channels; optionally the gradient w.r.t. ``a``.

    Only windows lying entirely inside the image are averaged, so constant images give
    the closed-form value. Images must be at least 11x11.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    A, B = _as_stack(a), _as_stack(b)
    if min(A.shape[:2]) < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW}, got {A.shape[:2]}")
    total = 0.0
    grad = np.zeros_like(A)
    npix = (A.shape[0] - WINDOW + 1) * (A.shape[1] - WINDOW + 1) * A.shape[2]
    for ch in range(A.shape[2]):
        x, y = A[..., ch], B[..., ch]
        mx, my = _valid(_blur(x)), _valid(_blur(y))
        exx, eyy, exy = _valid(_blur(x * x)), _valid(_blur(y * y)), _valid(_blur(x * y))
        vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
        n1 = 2 * mx * my + C1
        n2 = 2 * cxy + C2
        d1 = mx * mx + my * my + C1
        d2 = vx + vy + C2
        smap = n1 * n2 / (d1 * d2)
        total += smap.sum()
        if return_grad:
            # partials of the map w.r.t. mx, exx, exy (vx, cxy depend on them)
            ds_dn1 = n2 / (d1 * d2)
            ds_dn2 = n1 / (d1 * d2)
            ds_dd1 = -smap / d1
            ds_dd2 = -smap / d2
            g_mx = ds_dn1 * 2 * my + ds_dn2 * (-2 * my) + ds_dd1 * 2 * mx + ds_dd2 * (-2 * mx)
            g_exx = ds_dd2
            g_exy = ds_dn2 * 2
            # adjoint of the cropped blur: zero-pad, then the same symmetric correlation
            bt = lambda m: _blur(_pad_valid(m))
            grad[..., ch] = (bt(g_mx) + 2 * x * bt(g_exx) + y * bt(g_exy)) / npix
    value = total / npix
    if return_grad:
        return value, grad.reshape(a.shape)
    return value
