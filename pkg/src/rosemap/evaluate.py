"""Trajectory and image-quality evaluation: alignment, ATE, PSNR, TUM I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidPose, quat_normalize

PSNR_INFINITE = math.inf


class EvaluationError(Exception):
    pass


class DegenerateGeometryError(EvaluationError):
    pass


def umeyama_align(est_points: np.ndarray, ref_points: np.ndarray,
                  with_scale: bool = False):
    """Least-squares similarity (or rigid) transform est -> ref.

    Returns (R, t, s) minimizing sum ||ref - (s R est + t)||^2; s is fixed
    to 1 when with_scale is False.
    """
    est = np.asarray(est_points, dtype=float).reshape(-1, 3)
    ref = np.asarray(ref_points, dtype=float).reshape(-1, 3)
    if est.shape != ref.shape or est.shape[0] < 3:
        raise DegenerateGeometryError("need at least 3 matched point pairs")
    mu_e = est.mean(axis=0)
    mu_r = ref.mean(axis=0)
    X = est - mu_e
    Y = ref - mu_r
    cov = Y.T @ X / est.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    if D[0] < 1e-12 or D[1] / D[0] < 1e-9:
        raise DegenerateGeometryError("point configuration is (near-)collinear")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_e = float((X ** 2).sum()) / est.shape[0]
        s = float(np.trace(np.diag(D) @ S)) / var_e
    else:
        s = 1.0
    t = mu_r - s * R @ mu_e
    return R, t, s


@dataclass
class AlignedTrajectoryPair:
    timestamps: np.ndarray      # matched timestamps (from the estimate)
    est_points: np.ndarray      # (N, 3)
    ref_points: np.ndarray      # (N, 3)
    rotation: np.ndarray        # alignment est -> ref
    translation: np.ndarray
    scale: float
    with_scale: bool

    def aligned_est(self) -> np.ndarray:
        return (self.scale * (self.rotation @ self.est_points.T)).T + self.translation


def match_and_align(est_traj: list, ref_traj: list, with_scale: bool = False,
                    match_tolerance: float = 0.02) -> AlignedTrajectoryPair:
    """Match poses by nearest timestamp, then align the estimate to the reference."""
    if not est_traj or not ref_traj:
        raise EvaluationError("empty trajectory")
    ref_times = np.array([t for t, _ in ref_traj])
    pairs = []
    for t, pose in est_traj:
        k = int(np.argmin(np.abs(ref_times - t)))
        if abs(ref_times[k] - t) <= match_tolerance:
            pairs.append((t, pose.translation, ref_traj[k][1].translation))
    if len(pairs) < 3:
        raise EvaluationError(f"only {len(pairs)} matched pairs within tolerance")
    ts = np.array([p[0] for p in pairs])
    est = np.stack([p[1] for p in pairs])
    ref = np.stack([p[2] for p in pairs])
    R, t, s = umeyama_align(est, ref, with_scale)
    return AlignedTrajectoryPair(ts, est, ref, R, t, s, with_scale)


def ate_rmse(pair: AlignedTrajectoryPair) -> float:
    """Root-mean-square translational error after alignment, meters."""
    if pair.est_points.shape[0] == 0:
        raise EvaluationError("no matched pairs")
    err = pair.aligned_est() - pair.ref_points
    return float(np.sqrt((err ** 2).sum(axis=1).mean()))


def trajectory_length(poses: list) -> float:
    """Sum of consecutive translation distances; poses may be (t, pose) or pose."""
    if not poses:
        raise EvaluationError("empty trajectory")
    pts = np.stack([
        (p[1].translation if isinstance(p, tuple) else p.translation) for p in poses
    ])
    if pts.shape[0] < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return PSNR_INFINITE
    return 10.0 * math.log10(1.0 / mse)


# -- TUM trajectory text format -----------------------------------------------

def export_tum(path, traj: list):
    """Write `timestamp tx ty tz qx qy qz qw` lines at full precision."""
    with open(path, "w") as f:
        for t, pose in traj:
            tr = pose.translation
            q = pose.quat
            vals = (t, tr[0], tr[1], tr[2], q[1], q[2], q[3], q[0])
            f.write(" ".join(repr(float(v)) for v in vals) + "\n")


def import_tum(path) -> list:
    traj = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if len(tok) != 8:
                raise EvaluationError(f"{path}: line {lineno}: expected 8 fields, got {len(tok)}")
            try:
                t, tx, ty, tz, qx, qy, qz, qw = (float(x) for x in tok)
            except ValueError as e:
                raise EvaluationError(f"{path}: line {lineno}: {e}") from e
            traj.append((t, RigidPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    return traj


@dataclass
class MetricsReport:
    ate_rmse: float | None
    trajectory_length_m: float
    mean_psnr: float | None
    mean_ssim: float | None
    alignment: str = "se3"
    per_frame: list = field(default_factory=list)   # dicts: frame metrics

    def summary_rows(self) -> list:
        return [
            ("ate_rmse_m", self.ate_rmse),
            ("trajectory_length_m", self.trajectory_length_m),
            ("mean_psnr_db", self.mean_psnr),
            ("mean_ssim", self.mean_ssim),
            ("alignment", self.alignment),
        ]
