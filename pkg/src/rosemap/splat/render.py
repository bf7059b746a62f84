"""Differentiable rasterization of isotropic gaussians.

Forward model, per pixel, over splats sorted front-to-back by camera depth:

    alpha_i = min(o_i * exp(-d^2 / (2 sigma_i^2)), ALPHA_MAX)
    C  = sum_i c_i alpha_i T_i,   T_i = prod_{j<i} (1 - alpha_j)
    D  = sum_i z_i alpha_i T_i / A,   A = sum_i alpha_i T_i

with sigma_i = scale_i * f / z_i (isotropic 2D footprint) and compositing
terminated once T drops below T_CUTOFF, matching the usual splatting stack.
The whole pass is expressed as flat (splat, pixel) pair arrays with
segmented cumulative sums, so there is no per-splat Python loop.

The backward pass replays the pair structure cached by the forward pass and
propagates analytic gradients to all 8 splat parameters (in their stored,
unconstrained form) and to a left-multiplied world-frame pose twist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import PinholeCamera, RigidPose

ALPHA_MAX = 0.9999          # opacity saturation, keeps 1/(1-alpha) finite
T_CUTOFF = 5e-4             # stop compositing once transmittance falls below
ALPHA_EPS = 1e-4            # pair contributions below this are dropped
Z_NEAR = 1e-6               # splats at or behind this depth are culled


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3) in [0, 1]
    depth: np.ndarray   # (H, W) meters, alpha-normalized expected depth
    alpha: np.ndarray   # (H, W) in [0, 1]


@dataclass
class RenderGrads:
    means: np.ndarray             # (N, 3)
    log_scales: np.ndarray        # (N,)
    logit_opacities: np.ndarray   # (N,)
    colors: np.ndarray            # (N, 3)
    pose: np.ndarray              # (6,) twist, (rot, trans) ordering

    def as_param_dict(self) -> dict:
        return {
            "means": self.means,
            "log_scales": self.log_scales,
            "logit_opacities": self.logit_opacities,
            "colors": self.colors,
        }


@dataclass
class RenderContext:
    """Everything the backward pass needs from a forward render."""

    cam: PinholeCamera
    pose: RigidPose
    n_total: int
    vis_idx: np.ndarray       # map indices of visible splats, depth-sorted
    p_cam: np.ndarray         # (K, 3) camera-frame means
    u: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    color: np.ndarray         # (K, 3)
    means_world: np.ndarray   # (K, 3)
    pair_g: np.ndarray        # (M,) index into the K visible splats
    pair_pix: np.ndarray      # (M,) flat pixel index, segment-sorted
    pair_px: np.ndarray
    pair_py: np.ndarray
    pair_alpha: np.ndarray
    pair_gauss: np.ndarray    # exp(-d^2 / 2 sigma^2), pre-opacity
    pair_T: np.ndarray        # transmittance in front of each pair
    pair_live: np.ndarray     # bool, False once T fell under the cutoff
    alpha_acc: np.ndarray     # (H*W,)
    depth_acc: np.ndarray     # (H*W,)


def _splat_frame(splats, pose: RigidPose):
    R = pose.rotation_matrix()
    t = pose.translation
    p_cam = (splats.means - t) @ R  # == R.T @ (mu - t) row-wise
    return R, p_cam


def rasterize(splats, cam: PinholeCamera, pose: RigidPose,
              return_ctx: bool = False):
    """Render a splat map from a world-from-camera pose.

    Returns a RenderOutput, or (RenderOutput, RenderContext) when
    `return_ctx` is set for a subsequent render_backward call.
    """
    H, W = cam.height, cam.width
    n_total = len(splats)
    R, p_cam_all = _splat_frame(splats, pose)

    in_front = p_cam_all[:, 2] > Z_NEAR
    idx = np.flatnonzero(in_front)
    # front-to-back global order; per-pixel order follows because each splat
    # has a single camera depth
    order = np.argsort(p_cam_all[idx, 2], kind="stable")
    vis_idx = idx[order]

    p_cam = p_cam_all[vis_idx]
    z = p_cam[:, 2]
    u = cam.fx * p_cam[:, 0] / z + cam.cx
    v = cam.fy * p_cam[:, 1] / z + cam.cy
    scale = splats.scales[vis_idx]
    opacity = splats.opacities[vis_idx]
    color = splats.colors[vis_idx]
    sigma = scale * cam.mean_focal / z

    # footprint radius where alpha falls to ALPHA_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        log_ratio = np.log(np.maximum(opacity, ALPHA_EPS) / ALPHA_EPS)
    radius = sigma * np.sqrt(np.maximum(2.0 * log_ratio, 0.0))

    x0 = np.maximum(np.ceil(u - radius), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u + radius), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - radius), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v + radius), H - 1).astype(np.int64)
    nx = np.maximum(x1 - x0 + 1, 0)
    ny = np.maximum(y1 - y0 + 1, 0)
    counts = nx * ny
    keep = (counts > 0) & (opacity > ALPHA_EPS)

    vis_idx, p_cam, z, u, v = vis_idx[keep], p_cam[keep], z[keep], u[keep], v[keep]
    scale, opacity, color, sigma = scale[keep], opacity[keep], color[keep], sigma[keep]
    x0, y0, nx, ny, counts = x0[keep], y0[keep], nx[keep], ny[keep], counts[keep]

    if counts.size == 0 or counts.sum() == 0:
        empty = RenderOutput(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)))
        if return_ctx:
            ctx = RenderContext(cam, pose, n_total, vis_idx, p_cam, u, v, sigma,
                                scale, opacity, color, splats.means[vis_idx],
                                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                                np.zeros(0), np.zeros(0), np.zeros(0),
                                np.zeros(0, dtype=bool), np.zeros(H * W), np.zeros(H * W))
            return empty, ctx
        return empty

    # expand (splat, pixel) pairs
    M = int(counts.sum())
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pair_g = np.repeat(np.arange(counts.size), counts)
    within = np.arange(M) - offsets[pair_g]
    px = x0[pair_g] + within % nx[pair_g]
    py = y0[pair_g] + within // nx[pair_g]

    dx = px - u[pair_g]
    dy = py - v[pair_g]
    d2 = dx * dx + dy * dy
    gauss = np.exp(-d2 / (2.0 * sigma[pair_g] ** 2))
    alpha = np.minimum(opacity[pair_g] * gauss, ALPHA_MAX)

    strong = alpha > ALPHA_EPS
    pair_g, px, py, gauss, alpha = pair_g[strong], px[strong], py[strong], gauss[strong], alpha[strong]

    pix = py * W + px
    # stable sort groups pairs per pixel while preserving depth order
    order = np.argsort(pix, kind="stable")
    pair_g, px, py, pix = pair_g[order], px[order], py[order], pix[order]
    gauss, alpha = gauss[order], alpha[order]

    seg_start = np.empty(pix.shape, dtype=bool)
    if pix.size:
        seg_start[0] = True
        seg_start[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(seg_start) - 1

    log1m = np.log1p(-alpha)
    csum = np.cumsum(log1m)
    prefix = csum - log1m                      # exclusive cumulative sum
    seg_base = prefix[seg_start][seg_id]       # prefix at each segment start
    T = np.exp(prefix - seg_base)
    live = T >= T_CUTOFF
    if not np.all(live):
        # terminated pairs contribute nothing, forward or backward
        pair_g, px, py, pix = pair_g[live], px[live], py[live], pix[live]
        gauss, alpha, T = gauss[live], alpha[live], T[live]

    w = T * alpha
    color_flat = np.zeros((H * W, 3))
    for ch in range(3):
        color_flat[:, ch] = np.bincount(pix, weights=w * color[pair_g, ch], minlength=H * W)
    depth_flat = np.bincount(pix, weights=w * z[pair_g], minlength=H * W)
    alpha_flat = np.bincount(pix, weights=w, minlength=H * W)

    depth_img = np.where(alpha_flat > 1e-12, depth_flat / np.maximum(alpha_flat, 1e-12), 0.0)
    out = RenderOutput(color_flat.reshape(H, W, 3),
                       depth_img.reshape(H, W),
                       alpha_flat.reshape(H, W))
    if not return_ctx:
        return out
    ctx = RenderContext(cam, pose, n_total, vis_idx, p_cam, u, v, sigma, scale,
                        opacity, color, splats.means[vis_idx],
                        pair_g, pix, px, py, alpha, gauss, T,
                        np.ones(pix.shape, dtype=bool),
                        alpha_flat, depth_flat)
    return out, ctx


def render_backward(ctx: RenderContext,
                    d_color: np.ndarray | None = None,
                    d_depth: np.ndarray | None = None,
                    d_alpha: np.ndarray | None = None) -> RenderGrads:
    """Backpropagate image-space gradients through a cached forward pass.

    `d_depth` is taken w.r.t. the alpha-normalized depth the forward pass
    returned; the normalization chain is handled here.
    """
    cam, H, W = ctx.cam, ctx.cam.height, ctx.cam.width
    n_total = ctx.n_total
    grads = RenderGrads(np.zeros((n_total, 3)), np.zeros(n_total), np.zeros(n_total),
                        np.zeros((n_total, 3)), np.zeros(6))
    if ctx.pair_g.size == 0:
        return grads

    dC = np.zeros((H * W, 3)) if d_color is None else d_color.reshape(H * W, 3)
    dA_img = np.zeros(H * W) if d_alpha is None else d_alpha.reshape(H * W).astype(float).copy()
    dD_raw = np.zeros(H * W)
    if d_depth is not None:
        dd = d_depth.reshape(H * W)
        valid = ctx.alpha_acc > 1e-12
        a_safe = np.maximum(ctx.alpha_acc, 1e-12)
        dD_raw = np.where(valid, dd / a_safe, 0.0)
        dA_img = dA_img + np.where(valid, -dd * ctx.depth_acc / (a_safe * a_safe), 0.0)

    g_id = ctx.pair_g
    pix = ctx.pair_pix
    z = ctx.p_cam[:, 2]

    # per-pair downstream sensitivity of "one unit of composited weight"
    q = (ctx.color[g_id] * dC[pix]).sum(axis=1) + z[g_id] * dD_raw[pix] + dA_img[pix]

    w = np.where(ctx.pair_live, ctx.pair_T * ctx.pair_alpha, 0.0)
    wq = w * q

    seg_start = np.empty(pix.shape, dtype=bool)
    seg_start[0] = True
    seg_start[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(seg_start) - 1
    csum = np.cumsum(wq)
    base = (csum - wq)[seg_start][seg_id]
    incl = csum - base                                  # within-segment inclusive sum
    seg_total = np.bincount(seg_id, weights=wq)[seg_id]
    suffix = seg_total - incl                           # strictly-later pairs

    d_alpha_pair = np.where(ctx.pair_live,
                            ctx.pair_T * q - suffix / (1.0 - ctx.pair_alpha),
                            0.0)

    # alpha = min(o * gauss, ALPHA_MAX): saturated pairs are flat
    uncapped = ctx.pair_alpha < ALPHA_MAX
    d_alpha_pair = np.where(uncapped, d_alpha_pair, 0.0)

    o_pair = ctx.opacity[g_id]
    gauss = ctx.pair_gauss
    d_o_pair = d_alpha_pair * gauss
    d_gauss = d_alpha_pair * o_pair

    sig = ctx.sigma[g_id]
    dx = ctx.pair_px - ctx.u[g_id]
    dy = ctx.pair_py - ctx.v[g_id]
    d2 = dx * dx + dy * dy
    # d gauss / d sigma = gauss * d2 / sigma^3 ; d gauss / du = gauss * dx / sigma^2
    d_sigma_pair = d_gauss * gauss * d2 / sig ** 3
    d_u_pair = d_gauss * gauss * dx / sig ** 2
    d_v_pair = d_gauss * gauss * dy / sig ** 2

    K = ctx.vis_idx.size
    d_o = np.bincount(g_id, weights=d_o_pair, minlength=K)
    d_sigma = np.bincount(g_id, weights=d_sigma_pair, minlength=K)
    d_u = np.bincount(g_id, weights=d_u_pair, minlength=K)
    d_v = np.bincount(g_id, weights=d_v_pair, minlength=K)
    d_z_direct = np.bincount(g_id, weights=w * dD_raw[pix], minlength=K)
    d_col = np.stack([np.bincount(g_id, weights=w * dC[pix, ch], minlength=K)
                      for ch in range(3)], axis=1)

    # chain through projection and footprint scaling
    x, y = ctx.p_cam[:, 0], ctx.p_cam[:, 1]
    f = cam.mean_focal
    d_x = d_u * cam.fx / z
    d_y = d_v * cam.fy / z
    d_zc = (-d_u * cam.fx * x / z ** 2
            - d_v * cam.fy * y / z ** 2
            - d_sigma * ctx.scale * f / z ** 2
            + d_z_direct)
    d_pcam = np.stack([d_x, d_y, d_zc], axis=1)

    d_scale = d_sigma * f / z
    R = ctx.pose.rotation_matrix()
    d_mu = d_pcam @ R.T  # R @ d_pcam row-wise

    # activation chains: scale = exp(log_scale), o = sigmoid(logit)
    grads.means[ctx.vis_idx] = d_mu
    grads.log_scales[ctx.vis_idx] = d_scale * ctx.scale
    grads.logit_opacities[ctx.vis_idx] = d_o * ctx.opacity * (1.0 - ctx.opacity)
    grads.colors[ctx.vis_idx] = d_col

    # pose twist: d/drho = -sum R dpcam ; d/domega = -sum mu x (R dpcam)
    d_mu_sum = d_mu  # R @ d_pcam already
    grads.pose[3:] = -d_mu_sum.sum(axis=0)
    grads.pose[:3] = -np.cross(ctx.means_world, d_mu_sum).sum(axis=0)
    return grads
