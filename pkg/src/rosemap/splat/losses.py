"""Photometric losses for map optimization and pose refinement.

SSIM follows the classic 11x11 Gaussian-window formulation (sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2 on a [0,1] intensity range) evaluated on valid
windows only; the per-pixel map therefore has a 5-pixel border trimmed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_HALF = SSIM_WINDOW // 2

TV_EDGE_SHARPNESS = 10.0   # weight = exp(-sharpness * |image gradient|)


class LossShapeError(ValueError):
    pass


def _gaussian_kernel() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - _HALF
    k = np.exp(-0.5 * (r / SSIM_SIGMA) ** 2)
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable window filter, cropped to fully-supported pixels."""
    out = ndimage.correlate1d(img, _KERNEL, axis=0, mode="constant")
    out = ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _scatter_valid(grad: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _filter_valid: zero-pad then filter with the same kernel."""
    padded = np.zeros(shape)
    padded[_HALF:-_HALF, _HALF:-_HALF] = grad
    out = ndimage.correlate1d(padded, _KERNEL, axis=0, mode="constant")
    return ndimage.correlate1d(out, _KERNEL, axis=1, mode="constant")


def _as_channels(img: np.ndarray):
    if img.ndim == 2:
        return img[:, :, None]
    return img


def ssim(a: np.ndarray, b: np.ndarray):
    """Structural similarity; returns (mean scalar, per-pixel map).

    Multi-channel inputs are averaged channel-wise. The map covers valid
    window positions: shape (H - 10, W - 10).
    """
    value, smap, _ = _ssim_core(a, b, want_grad=False)
    return value, smap


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """Like ssim(), plus d(mean SSIM)/d(b) with b's original shape."""
    return _ssim_core(a, b, want_grad=True)


def _ssim_core(a, b, want_grad):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise LossShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    H, W = a.shape[:2]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise LossShapeError("image smaller than the SSIM window")
    ac = _as_channels(a)
    bc = _as_channels(b)
    C = ac.shape[2]
    smap = np.zeros((H - 2 * _HALF, W - 2 * _HALF))
    grad = np.zeros_like(bc) if want_grad else None
    n_valid = smap.size * C
    for ch in range(C):
        x, y = ac[:, :, ch], bc[:, :, ch]
        mx = _filter_valid(x)
        my = _filter_valid(y)
        exx = _filter_valid(x * x)
        eyy = _filter_valid(y * y)
        exy = _filter_valid(x * y)
        a1 = 2 * mx * my + SSIM_C1
        b1 = mx * mx + my * my + SSIM_C1
        a2 = 2 * (exy - mx * my) + SSIM_C2
        b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
        s = (a1 * a2) / (b1 * b2)
        smap += s / C
        if want_grad:
            # moments: my = w*y, eyy = w*(y^2), exy = w*(x y)
            d_my = 2 * mx * (a2 - a1) / (b1 * b2) - 2 * my * s * (1 / b1 - 1 / b2)
            d_eyy = -s / b2
            d_exy = 2 * a1 / (b1 * b2)
            g = (_scatter_valid(d_my, (H, W))
                 + 2 * y * _scatter_valid(d_eyy, (H, W))
                 + x * _scatter_valid(d_exy, (H, W)))
            grad[:, :, ch] = g / n_valid
    value = float(smap.mean())
    if want_grad and b.ndim == 2:
        grad = grad[:, :, 0]
    return value, smap, grad


def ssim_error_map_full(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel (1 - SSIM)/2 map edge-padded back to full resolution."""
    _, smap = ssim(a, b)
    err = 0.5 * (1.0 - smap)
    return np.pad(err, _HALF, mode="edge")


def edge_aware_tv(depth: np.ndarray, image: np.ndarray) -> float:
    """Depth smoothness penalty relaxed across strong image edges."""
    value, _ = _edge_aware_tv_with_grad(depth, image)
    return value


def _edge_aware_tv_with_grad(depth: np.ndarray, image: np.ndarray):
    depth = np.asarray(depth, dtype=float)
    img = _as_channels(np.asarray(image, dtype=float))
    if depth.shape != img.shape[:2]:
        raise LossShapeError(f"depth {depth.shape} vs image {img.shape[:2]}")
    n = depth.size
    dzx = depth[:, 1:] - depth[:, :-1]
    dzy = depth[1:, :] - depth[:-1, :]
    gix = np.abs(img[:, 1:] - img[:, :-1]).mean(axis=2)
    giy = np.abs(img[1:, :] - img[:-1, :]).mean(axis=2)
    wx = np.exp(-TV_EDGE_SHARPNESS * gix)
    wy = np.exp(-TV_EDGE_SHARPNESS * giy)
    value = float((np.abs(dzx) * wx).sum() + (np.abs(dzy) * wy).sum()) / n
    grad = np.zeros_like(depth)
    sx = np.sign(dzx) * wx / n
    sy = np.sign(dzy) * wy / n
    grad[:, 1:] += sx
    grad[:, :-1] -= sx
    grad[1:, :] += sy
    grad[:-1, :] -= sy
    return value, grad


@dataclass
class ReconLoss:
    value: float
    l1_term: float
    ssim_term: float
    tv_term: float
    d_color: np.ndarray
    d_depth: np.ndarray


def loss_reconstruction(image: np.ndarray, rendered_color: np.ndarray,
                        rendered_depth: np.ndarray | None,
                        beta: np.ndarray | float,
                        lam1: float, lam2: float) -> ReconLoss:
    """Uncertainty-weighted photometric loss with depth smoothness.

    beta enters the L1 term as a fixed per-pixel weight; no gradient is
    produced for it here. Pass rendered_depth=None (or lam2=0) for the
    pose-refinement variant without the depth term.
    """
    image = np.asarray(image, dtype=float)
    rendered_color = np.asarray(rendered_color, dtype=float)
    if image.shape != rendered_color.shape:
        raise LossShapeError(f"image {image.shape} vs render {rendered_color.shape}")
    beta_arr = np.asarray(beta, dtype=float)
    if beta_arr.ndim == 2:
        if beta_arr.shape != image.shape[:2]:
            raise LossShapeError("beta map shape mismatch")
        beta_arr = beta_arr[:, :, None]

    n = image.size
    resid = image - rendered_color
    l1 = float((np.abs(resid) / beta_arr).sum() / n)
    d_color = -np.sign(resid) / beta_arr / n * (1.0 - lam1)

    ssim_term = 0.0
    if lam1 > 0.0:
        s_val, _, s_grad = ssim_with_grad(image, rendered_color)
        ssim_term = 1.0 - s_val
        d_color = d_color - lam1 * s_grad
    tv_term = 0.0
    d_depth = np.zeros(image.shape[:2])
    if lam2 > 0.0 and rendered_depth is not None:
        tv_term, d_tv = _edge_aware_tv_with_grad(rendered_depth, image)
        d_depth = lam2 * d_tv
    value = (1.0 - lam1) * l1 + lam1 * ssim_term + lam2 * tv_term
    return ReconLoss(value, l1, ssim_term, tv_term, d_color, d_depth)
