"""The incremental mapping loop.

Sensor fusion gives odometry keyframes; the factor graph (odometry +
landmark + prior) estimates the trajectory; keyframes are discretized into
distance rings around the landmark. The splat map is seeded from the inner
ring and grown ring by ring: each frontier frame is pose-refined against
the current map, back-projected into uncovered pixels, and the map is
re-optimized with interleaved re-refinement. When the frontier's pose
uncertainty is still comparable to the seed region's, accepted refinements
are pushed back into the graph as unary factors and the whole trajectory
is re-optimized.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..evaluate import MetricsReport, ate_rmse, export_tum, match_and_align, psnr, trajectory_length
from ..filters import EkfParams, extract_odometry_deltas, run_filter
from ..geometry import PinholeCamera, RigidPose, compose, inverse
from ..graph import FactorGraph, GraphError, LANDMARK_POSE, LmParams, ROBOT_POSE
from ..sim.rosette import R_DOWN
from ..splat.densify import densify_and_prune
from ..splat.gaussians import SplatMap
from ..splat.losses import loss_reconstruction, ssim, ssim_error_map_full
from ..splat.render import rasterize, render_backward
from ..splat.uncertainty import (
    UncertaintyModel,
    image_features,
    kmeans_labels,
    loss_uncertainty,
    uncertainty_forward,
)
from .config import PipelineConfig
from .refine import RefinementResult, refine_pose
from .rings import Ring, ring_partition

log = logging.getLogger("rosemap.mapper")

LANDMARK_VAR = "L"


class PipelineError(Exception):
    pass


def _var_name(frame_id: int) -> str:
    return f"x{frame_id:05d}"


def _diag_info(rot_sigma: float, trans_sigma: float) -> np.ndarray:
    return np.diag([1.0 / rot_sigma**2] * 3 + [1.0 / trans_sigma**2] * 3)


def backproject_grid(image: np.ndarray, depth: np.ndarray, pose: RigidPose,
                     cam: PinholeCamera, stride: int, pixel_mask: np.ndarray | None = None):
    """Lift a strided pixel grid into world-frame splat seeds.

    Returns (means, scales, colors); scale is half the world-space footprint
    of one grid cell at that depth. Pixels with non-positive depth (or
    excluded by the mask) are skipped.
    """
    H, W = cam.height, cam.width
    if depth.shape != (H, W):
        raise PipelineError(f"depth shape {depth.shape} does not match camera {(H, W)}")
    ys = np.arange(stride // 2, H, stride)
    xs = np.arange(stride // 2, W, stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    gy = gy.ravel()
    gx = gx.ravel()
    if pixel_mask is not None:
        keep = pixel_mask[gy, gx]
        gy, gx = gy[keep], gx[keep]
    z = depth[gy, gx]
    ok = z > 1e-3
    gy, gx, z = gy[ok], gx[ok], z[ok]
    if gy.size == 0:
        return np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3))
    rays = np.stack([(gx - cam.cx) / cam.fx,
                     (gy - cam.cy) / cam.fy,
                     np.ones_like(z)], axis=1)
    p_cam = rays * z[:, None]
    R = pose.rotation_matrix()
    p_world = p_cam @ R.T + pose.translation
    colors = image[gy, gx]
    scales = 0.5 * stride * z / cam.mean_focal
    return p_world, scales, colors


@dataclass
class RingMetrics:
    ring: int
    frames: int
    psnr: float
    ssim: float
    ate_so_far: float
    gaussian_count: int
    reopt_triggered: bool


@dataclass
class PipelineResult:
    trajectory: list                 # (t, RigidPose) graph estimates
    render_poses: list               # (t, RigidPose) incl. local refinements
    dead_reckoning: list             # (t, RigidPose) chained EKF odometry
    splats: SplatMap
    ring_metrics: list
    report: MetricsReport
    runtime_s: float

    def write_outputs(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        export_tum(out / "trajectory.tum", self.trajectory)
        export_tum(out / "render_poses.tum", self.render_poses)
        export_tum(out / "dead_reckoning.tum", self.dead_reckoning)
        self.splats.save_ply(out / "splats.ply")
        self.splats.save_npz(out / "splats.npz")
        with open(out / "metrics.csv", "w") as f:
            f.write("ring,frames,psnr,ssim,ate_so_far,gaussian_count,reopt_triggered\n")
            for m in self.ring_metrics:
                f.write(f"{m.ring},{m.frames},{m.psnr:.6f},{m.ssim:.6f},"
                        f"{m.ate_so_far:.6f},{m.gaussian_count},{int(m.reopt_triggered)}\n")
        with open(out / "summary.csv", "w") as f:
            f.write("metric,value\n")
            for key, value in self.report.summary_rows():
                f.write(f"{key},{value}\n")


class MapperSession:
    """Mutable pipeline state: log, graph, splat map, uncertainty head."""

    def __init__(self, sensor_log, camera: PinholeCamera, depth_provider,
                 config: PipelineConfig, true_poses=None, initial_pose=None,
                 ekf_params: EkfParams | None = None):
        if not sensor_log.images:
            raise PipelineError("sensor log contains no images")
        if depth_provider is None:
            raise PipelineError("a pseudo-depth provider is required")
        self.logdata = sensor_log
        self.cam = camera
        self.depth_provider = depth_provider
        self.config = config
        self.true_poses = true_poses
        self.rng = np.random.default_rng(config.rng_seed)
        self.ekf_params = ekf_params or EkfParams()

        self.frame_times = [t for t, _ in sensor_log.images]
        self.images = {i: img for i, (_, img) in enumerate(sensor_log.images)}
        self.n_frames = len(self.frame_times)

        if initial_pose is None:
            if true_poses:
                initial_pose = true_poses[0][1]
            else:
                z0 = -sensor_log.pressure_depth[0][1] if sensor_log.pressure_depth else 0.0
                initial_pose = RigidPose.from_rt(R_DOWN, np.array([0.0, 0.0, z0]))

        filt = run_filter(sensor_log, initial_pose, self.ekf_params)
        if len(filt.keyframes) != self.n_frames:
            raise PipelineError("keyframe count does not match image count")
        self.ekf_keyframes = filt.keyframes
        self.dead_reckoning = [(t, s.pose) for t, s in filt.keyframes]

        self.graph = self._build_graph()
        self.graph.solve_lm(LmParams(max_iters=100))
        self.render_overrides: dict[str, RigidPose] = {}

        self.splats = SplatMap()
        self._grad_sum = np.zeros((0, 3))
        self._grad_count = np.zeros(0)

        self.unc_model = None
        self._features: dict[int, np.ndarray] = {}
        self._labels: dict[int, np.ndarray] = {}
        if config.uncertainty_enabled:
            self.unc_model = UncertaintyModel.create(hidden=config.unc_hidden,
                                                     beta_min=config.beta_min,
                                                     seed=config.rng_seed)
        self.integrated: list[int] = []
        self.ring_metrics: list[RingMetrics] = []

    # -- graph construction ---------------------------------------------------

    def _frame_of_time(self, t: float) -> int | None:
        times = np.asarray(self.frame_times)
        k = int(np.argmin(np.abs(times - t)))
        if abs(times[k] - t) > 1e-6:
            return None
        return k

    def _build_graph(self) -> FactorGraph:
        cfg = self.config
        g = FactorGraph()
        for i, (t, s) in enumerate(self.ekf_keyframes):
            g.add_variable(_var_name(i), ROBOT_POSE, s.pose)
        g.add_prior(_var_name(0), self.ekf_keyframes[0][1].pose,
                    _diag_info(cfg.prior_sigma_rot, cfg.prior_sigma_trans))
        deltas = extract_odometry_deltas(self.ekf_keyframes, self.ekf_params)
        for i, (delta, cov) in enumerate(deltas):
            g.add_odometry(_var_name(i), _var_name(i + 1), delta,
                           np.linalg.inv(cov), huber_k=cfg.huber_k)
        if not self.logdata.landmark_obs:
            raise PipelineError("no landmark observations in the log")
        lm_info = _diag_info(cfg.landmark_sigma_rot, cfg.landmark_sigma_trans)
        lm_init = None
        pending = []
        for t, rel in self.logdata.landmark_obs:
            fid = self._frame_of_time(t)
            if fid is None:
                continue
            if lm_init is None:
                lm_init = compose(self.ekf_keyframes[fid][1].pose, rel)
            pending.append((fid, rel))
        if lm_init is None:
            raise PipelineError("landmark observations do not align with any keyframe")
        g.add_variable(LANDMARK_VAR, LANDMARK_POSE, lm_init)
        for fid, rel in pending:
            g.add_landmark_measurement(_var_name(fid), LANDMARK_VAR, rel, lm_info,
                                       huber_k=cfg.huber_k)
        return g

    # -- pose bookkeeping -------------------------------------------------------

    def graph_pose(self, fid: int) -> RigidPose:
        return self.graph.variables[_var_name(fid)].estimate

    def render_pose(self, fid: int) -> RigidPose:
        return self.render_overrides.get(_var_name(fid), self.graph_pose(fid))

    def landmark_estimate(self) -> RigidPose:
        return self.graph.variables[LANDMARK_VAR].estimate

    def trajectory_estimate(self) -> list:
        return [(self.frame_times[i], self.graph_pose(i)) for i in range(self.n_frames)]

    def render_trajectory(self) -> list:
        return [(self.frame_times[i], self.render_pose(i)) for i in range(self.n_frames)]

    def partition(self) -> list:
        keyframes = [(i, _var_name(i), self.graph_pose(i)) for i in range(self.n_frames)]
        return ring_partition(keyframes, self.landmark_estimate().translation[:2],
                              self.config.ring_width)

    # -- uncertainty head ----------------------------------------------------------

    def features(self, fid: int) -> np.ndarray:
        if fid not in self._features:
            self._features[fid] = image_features(self.images[fid])
        return self._features[fid]

    def labels(self, fid: int) -> np.ndarray:
        if fid not in self._labels:
            self._labels[fid] = kmeans_labels(self.features(fid), self.config.unc_clusters,
                                              seed=self.config.rng_seed + fid)
        return self._labels[fid]

    def beta(self, fid: int):
        if self.unc_model is None:
            return 1.0
        return uncertainty_forward(self.unc_model, self.features(fid))

    # -- splat bookkeeping ------------------------------------------------------------

    def _sync_grad_buffers(self):
        n = len(self.splats)
        if self._grad_sum.shape[0] != n:
            self._grad_sum = np.zeros((n, 3))
            self._grad_count = np.zeros(n)

    def backproject_frame(self, fid: int, ring_tag: int, only_uncovered: bool):
        """Sample a pixel grid, lift through pseudo-depth, add splats."""
        cfg = self.config
        depth = self.depth_provider(self.frame_times[fid])
        pose = self.render_pose(fid)
        mask = None
        if only_uncovered and len(self.splats):
            alpha = rasterize(self.splats, self.cam, pose).alpha
            mask = alpha < cfg.fill_alpha
        means, scales, colors = backproject_grid(self.images[fid], depth, pose,
                                                 self.cam, cfg.seed_stride, mask)
        if means.shape[0]:
            self.splats.add(means, scales, 0.5, colors, ring_tag=ring_tag)
            self._sync_grad_buffers()
        return int(means.shape[0])

    # -- optimization ---------------------------------------------------------------------

    def map_step(self, fid: int) -> float:
        cfg = self.config
        img = self.images[fid]
        pose = self.render_pose(fid)
        out, ctx = rasterize(self.splats, self.cam, pose, return_ctx=True)
        beta = self.beta(fid)
        loss = loss_reconstruction(img, out.color, out.depth, beta, cfg.lambda1, cfg.lambda2)
        grads = render_backward(ctx, d_color=loss.d_color, d_depth=loss.d_depth)
        self.splats.adam_step(grads.as_param_dict(), {
            "means": cfg.lr_means,
            "log_scales": cfg.lr_log_scales,
            "logit_opacities": cfg.lr_logit_opacities,
            "colors": cfg.lr_colors,
        })
        self._sync_grad_buffers()
        self._grad_sum += grads.means
        self._grad_count += (np.abs(grads.means).sum(axis=1) > 0).astype(float)
        if self.unc_model is not None:
            err_map = ssim_error_map_full(img, out.color)
            unc = loss_uncertainty(self.unc_model, self.features(fid), err_map,
                                   cfg.lambda3, cfg.lambda4,
                                   cluster_labels=self.labels(fid))
            self.unc_model.apply_gradients(unc.weight_grads, cfg.unc_lr)
        return loss.value

    def run_schedule(self, pool: list, steps: int, ring_tag: int,
                     frontier: list | None = None) -> list:
        """Map optimization steps over `pool`, with periodic density control
        and (when a frontier is given) interleaved pose re-refinement."""
        cfg = self.config
        refreshed: list[RefinementResult] = []
        pool = list(pool)
        for step in range(1, steps + 1):
            if frontier and self.rng.random() < cfg.frontier_sample_bias:
                fid = int(frontier[self.rng.integers(len(frontier))])
            else:
                fid = int(pool[self.rng.integers(len(pool))])
            self.map_step(fid)
            if cfg.densify_every and step % cfg.densify_every == 0 and step < steps:
                self._sync_grad_buffers()
                densify_and_prune(self.splats, self._grad_sum, self._grad_count,
                                  cfg.densify_grad_threshold, cfg.densify_scale_split,
                                  cfg.opacity_floor, self.rng)
                self._grad_sum = np.zeros((len(self.splats), 3))
                self._grad_count = np.zeros(len(self.splats))
            if (frontier and cfg.interleave_every
                    and step % cfg.interleave_every == 0 and step < steps):
                refreshed = self._refine_frames(frontier, cfg.refine_interleave_iters)
        return refreshed

    def _refine_frames(self, frame_ids: list, iters: int) -> list:
        results = []
        for fid in frame_ids:
            res = refine_pose(self.splats, self.images[fid], self.render_pose(fid),
                              self.cam, self.config, beta=self.beta(fid),
                              frame_id=fid, iters=iters)
            if res.accepted:
                self.render_overrides[_var_name(fid)] = res.refined_pose
            results.append(res)
        return results

    # -- pipeline stages ------------------------------------------------------------------

    def seed_initialize(self, ring: Ring):
        if not ring.members:
            raise PipelineError("seed ring is empty")
        for fid in ring.frame_ids():
            self.backproject_frame(fid, ring_tag=0, only_uncovered=False)
        self.integrated.extend(ring.frame_ids())
        self.run_schedule(self.integrated, self.config.seed_steps, ring_tag=0)

    def expand_frontier(self, ring: Ring, frame_ids: list) -> list:
        """Integrate one frontier ring; returns the latest refinement per frame."""
        if not frame_ids:
            return []
        latest: dict[int, RefinementResult] = {}
        for fid in frame_ids:
            res = refine_pose(self.splats, self.images[fid], self.render_pose(fid),
                              self.cam, self.config, beta=self.beta(fid), frame_id=fid)
            if res.accepted:
                self.render_overrides[_var_name(fid)] = res.refined_pose
            latest[fid] = res
            self.backproject_frame(fid, ring_tag=ring.index, only_uncovered=True)
        if not any(r.attempted for r in latest.values()):
            log.warning("ring %d: no frontier refinement had enough coverage", ring.index)
        self.integrated.extend(frame_ids)
        steps = (self.config.steps_per_ring
                 + self.config.steps_per_frontier_frame * len(frame_ids))
        refreshed = self.run_schedule(self.integrated, steps,
                                      ring_tag=ring.index, frontier=frame_ids)
        for res in refreshed:
            latest[res.frame_id] = res
        return [latest[fid] for fid in frame_ids]

    def should_reoptimize(self, frontier_vars: list, seed_vars: list) -> bool:
        try:
            covs = self.graph.marginal_covariances(list(frontier_vars) + list(seed_vars))
        except GraphError:
            log.warning("marginal covariances unavailable; skipping re-optimization")
            return False
        front = np.mean([np.trace(covs[v]) for v in frontier_vars])
        seed = np.mean([np.trace(covs[v]) for v in seed_vars])
        if seed <= 0:
            return False
        return bool(front <= self.config.gate_factor * seed)

    def global_reoptimize(self, refinements: list) -> bool:
        cfg = self.config
        accepted = [r for r in refinements if r.accepted]
        if not accepted:
            return False
        sigma_ext = np.diag([cfg.sigma_ext_rot**2] * 3 + [cfg.sigma_ext_trans**2] * 3)
        self.graph.add_external_pose_factors([
            (_var_name(r.frame_id), r.refined_pose, sigma_ext) for r in accepted
        ])
        previous = self.graph.estimates()
        _, report = self.graph.solve_lm(LmParams(max_iters=100))
        if not report.converged and report.final_cost > report.initial_cost:
            log.warning("global re-optimization did not converge; keeping previous estimates")
            self.graph.set_estimates(previous)
            return False
        # graph estimates now carry the refinements; rendering follows them
        self.render_overrides.clear()
        return True

    # -- metrics -----------------------------------------------------------------------------

    def integrated_quality(self) -> tuple[float, float]:
        if not self.integrated:
            return math.nan, math.nan
        psnrs, ssims = [], []
        for fid in self.integrated:
            out = rasterize(self.splats, self.cam, self.render_pose(fid))
            img = self.images[fid]
            p = psnr(img, out.color)
            psnrs.append(min(p, 99.0))
            ssims.append(ssim(img, out.color)[0])
        return float(np.mean(psnrs)), float(np.mean(ssims))

    def current_ate(self) -> float:
        if not self.true_poses:
            return math.nan
        pair = match_and_align(self.trajectory_estimate(), self.true_poses,
                               with_scale=False, match_tolerance=self.config.match_tolerance)
        return ate_rmse(pair)

    def record_metrics(self, ring_index: int, reopt: bool):
        mean_psnr, mean_ssim = self.integrated_quality()
        self.ring_metrics.append(RingMetrics(
            ring_index, len(self.integrated), mean_psnr, mean_ssim,
            self.current_ate(), len(self.splats), reopt))


def run_pipeline(sensor_log, camera: PinholeCamera, depth_provider,
                 config: PipelineConfig, true_poses=None, initial_pose=None,
                 ekf_params: EkfParams | None = None) -> PipelineResult:
    """Run the full mapping pipeline over an in-memory sensor log."""
    t_start = time.time()
    session = MapperSession(sensor_log, camera, depth_provider, config,
                            true_poses=true_poses, initial_pose=initial_pose,
                            ekf_params=ekf_params)
    cfg = config
    rings = session.partition()
    n_rings_initial = len(rings)

    if cfg.mode == "batch":
        order = list(range(session.n_frames))
        for fid in order:
            session.backproject_frame(fid, ring_tag=0, only_uncovered=fid != order[0])
        session.integrated.extend(order)
        # identical total budget to what the incremental schedule would get
        n_seed = len(rings[0].members)
        total_steps = (cfg.seed_steps
                       + cfg.steps_per_ring * max(n_rings_initial - 1, 0)
                       + cfg.steps_per_frontier_frame * (session.n_frames - n_seed))
        session.run_schedule(session.integrated, total_steps, ring_tag=0)
        session.record_metrics(ring_index=0, reopt=False)
    else:
        seed_ring = rings[0]
        if seed_ring.index != 0:
            raise PipelineError("seed ring missing")
        session.seed_initialize(seed_ring)
        session.record_metrics(ring_index=0, reopt=False)
        guard = 0
        while guard < 10 * n_rings_initial + 10:
            guard += 1
            rings = session.partition()
            frontier = None
            pending = None
            for ring in rings:
                todo = [fid for fid in ring.frame_ids() if fid not in set(session.integrated)]
                if todo:
                    frontier = ring
                    pending = todo
                    break
            if frontier is None:
                break
            refinements = session.expand_frontier(frontier, pending)
            reopt_done = False
            if cfg.reopt_enabled:
                seed_vars = [vid for _, vid in rings[0].members]
                frontier_vars = [_var_name(fid) for fid in pending]
                if session.should_reoptimize(frontier_vars, seed_vars):
                    reopt_done = session.global_reoptimize(refinements)
            session.record_metrics(ring_index=frontier.index, reopt=reopt_done)

    mean_psnr, mean_ssim = session.integrated_quality()
    trajectory = session.trajectory_estimate()
    ate = session.current_ate()
    report = MetricsReport(
        ate_rmse=None if math.isnan(ate) else ate,
        trajectory_length_m=trajectory_length(trajectory),
        mean_psnr=mean_psnr,
        mean_ssim=mean_ssim,
        alignment="se3",
    )
    return PipelineResult(
        trajectory=trajectory,
        render_poses=session.render_trajectory(),
        dead_reckoning=session.dead_reckoning,
        splats=session.splats,
        ring_metrics=session.ring_metrics,
        report=report,
        runtime_s=time.time() - t_start,
    )
