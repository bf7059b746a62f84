"""Local camera pose refinement against a frozen splat map.

Gradient descent on the 6-dof twist of a single camera, driven by the
photometric loss (weighted L1 plus SSIM; no depth term). Steps use the
normalized gradient direction with separate rotation/translation step
sizes under a cosine decay, so the step magnitudes are in radians/meters
regardless of image scaling. Map parameters never move here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import PinholeCamera, RigidPose, Twist, compose, inverse, se3_exp, se3_log
from ..splat.losses import loss_reconstruction
from ..splat.render import rasterize, render_backward
from .config import PipelineConfig

_STALL_ITERS = 20
_STALL_TOL = 1e-9
_WARMUP_ITERS = 5


@dataclass
class RefinementResult:
    frame_id: int
    initial_pose: RigidPose
    refined_pose: RigidPose
    initial_loss: float
    final_loss: float
    iterations: int
    accepted: bool
    attempted: bool
    coverage: float

    def displacement(self) -> tuple[float, float]:
        """(rotation rad, translation m) moved from the initial pose."""
        xi = se3_log(compose(inverse(self.initial_pose), self.refined_pose))
        return float(np.linalg.norm(xi.rotational)), float(np.linalg.norm(xi.translational))


def _photometric(image, splats, cam, pose, beta, lam1):
    out, ctx = rasterize(splats, cam, pose, return_ctx=True)
    loss = loss_reconstruction(image, out.color, None, beta, lam1, 0.0)
    return out, ctx, loss


def refine_pose(splats, image: np.ndarray, init_pose: RigidPose, cam: PinholeCamera,
                config: PipelineConfig, beta=1.0, frame_id: int = -1,
                iters: int | None = None) -> RefinementResult:
    """Refine one camera pose; returns a not-attempted result when the
    rendered view overlaps the map too little to give a usable signal."""
    iters = config.refine_iters if iters is None else iters
    out, ctx, loss = _photometric(image, splats, cam, init_pose, beta, config.lambda1)
    coverage = float(out.alpha.mean())
    initial_loss = loss.value
    if coverage < config.coverage_min:
        return RefinementResult(frame_id, init_pose, init_pose, initial_loss, initial_loss,
                                0, accepted=False, attempted=False, coverage=coverage)

    pose = init_pose
    best_pose = init_pose
    best_loss = initial_loss
    prev_best = best_loss
    stall = 0
    m = np.zeros(6)
    v = np.zeros(6)
    lr = np.array([config.refine_lr_rot] * 3 + [config.refine_lr_trans] * 3)
    it = 0
    for it in range(1, iters + 1):
        grads = render_backward(ctx, d_color=loss.d_color)
        g = grads.pose
        if float(np.abs(g).max()) <= 1e-14:
            break
        # Adam on the twist, cosine-decayed step sizes per block
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1.0 - 0.9 ** it)
        v_hat = v / (1.0 - 0.999 ** it)
        decay = 0.5 * (1.0 + math.cos(math.pi * (it - 1) / max(iters, 1)))
        decay *= min(1.0, it / _WARMUP_ITERS)
        step = -lr * decay * m_hat / (np.sqrt(v_hat) + 1e-12)
        pose = compose(se3_exp(Twist.from_vector(step)), pose)
        out, ctx, loss = _photometric(image, splats, cam, pose, beta, config.lambda1)
        if loss.value < best_loss:
            best_loss = loss.value
            best_pose = pose
        if prev_best - best_loss < _STALL_TOL:
            stall += 1
            if stall >= _STALL_ITERS:
                break
        else:
            stall = 0
        prev_best = best_loss

    result = RefinementResult(frame_id, init_pose, best_pose, initial_loss, best_loss,
                              it, accepted=False, attempted=True, coverage=coverage)
    rot_disp, trans_disp = result.displacement()
    result.accepted = (best_loss <= initial_loss
                       and rot_disp <= config.refine_max_step_rot
                       and trans_disp <= config.refine_max_step_trans)
    return result
