"""Pose-graph MAP inference over robot poses and a fixed landmark.

Variables are SE(3) elements; factors constrain them through a shared
log-residual form r = Log(Z^-1 * predicted), whitened by the square root
of the factor's information matrix. Unary factors (priors and externally
refined poses) and binary factors (odometry, landmark measurements) share
the same machinery. Solving is damped Gauss-Newton (Levenberg-Marquardt)
over left-multiplied twists, with optional Huber reweighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .geometry import (
    RigidPose,
    Twist,
    compose,
    inverse,
    se3_adjoint,
    se3_exp,
    se3_log,
    se3_right_jacobian_inv,
)

ROBOT_POSE = "robot_pose"
LANDMARK_POSE = "landmark_pose"

PRIOR = "prior"
ODOMETRY = "odometry"
LANDMARK_MEASUREMENT = "landmark_measurement"
EXTERNAL_3DGS = "external_3dgs"

_UNARY_KINDS = (PRIOR, EXTERNAL_3DGS)
_BINARY_KINDS = (ODOMETRY, LANDMARK_MEASUREMENT)

DENSE_SOLVE_MAX_VARIABLES = 50


class GraphError(Exception):
    pass


class GaugeFreedomError(GraphError):
    """The graph has variables not anchored through any prior."""


class SingularInformationError(GraphError):
    pass


@dataclass
class GraphVariable:
    id: str
    kind: str
    estimate: RigidPose


@dataclass
class Factor:
    kind: str
    var_ids: tuple
    measurement: RigidPose
    information: np.ndarray          # 6x6 SPD, (rot, trans) ordering
    huber_k: float | None = None

    def __post_init__(self):
        info = np.asarray(self.information, dtype=float).reshape(6, 6)
        if not np.allclose(info, info.T, atol=1e-9):
            raise GraphError("information matrix must be symmetric")
        self.information = 0.5 * (info + info.T)
        expected = 1 if self.kind in _UNARY_KINDS else 2
        if self.kind not in _UNARY_KINDS + _BINARY_KINDS:
            raise GraphError(f"unknown factor kind {self.kind}")
        if len(self.var_ids) != expected:
            raise GraphError(f"{self.kind} factor needs {expected} variable(s)")
        if self.huber_k is not None and self.huber_k <= 0:
            raise GraphError("huber threshold must be positive")

    def sqrt_information(self) -> np.ndarray:
        try:
            L = np.linalg.cholesky(self.information + 1e-300 * np.eye(6))
        except np.linalg.LinAlgError as e:
            raise GraphError("information matrix is not positive definite") from e
        return L.T


@dataclass
class SolveReport:
    initial_cost: float
    final_cost: float
    iterations: int
    converged: bool
    lambda_final: float = 0.0


@dataclass
class LmParams:
    max_iters: int = 50
    lambda_init: float = 1e-4
    lambda_scale: float = 10.0
    cost_tol: float = 1e-9


def robust_weight(k: float, r_norm: float) -> float:
    """Huber IRLS weight on the whitened residual norm."""
    if k <= 0:
        raise GraphError("huber threshold must be positive")
    if r_norm <= k:
        return 1.0
    return k / r_norm


def _robust_cost(k: float | None, r_norm: float) -> float:
    if k is None or r_norm <= k:
        return r_norm * r_norm
    return k * (2.0 * r_norm - k)


def residual(factor: Factor, estimates: dict) -> tuple[np.ndarray, dict]:
    """Whitened residual and Jacobians w.r.t. each variable's twist."""
    W = factor.sqrt_information()
    if factor.kind in _UNARY_KINDS:
        x = estimates[factor.var_ids[0]]
        err = compose(inverse(factor.measurement), x)
        xi = se3_log(err)
        Jr_inv = se3_right_jacobian_inv(xi)
        J = Jr_inv @ se3_adjoint(inverse(x))
        return W @ xi.as_vector(), {factor.var_ids[0]: W @ J}
    xi_id, xj_id = factor.var_ids
    xi_pose = estimates[xi_id]
    xj_pose = estimates[xj_id]
    err = compose(inverse(factor.measurement), compose(inverse(xi_pose), xj_pose))
    r = se3_log(err)
    Jr_inv = se3_right_jacobian_inv(r)
    adj = se3_adjoint(inverse(xj_pose))
    J_j = Jr_inv @ adj
    return W @ r.as_vector(), {xi_id: -W @ J_j, xj_id: W @ J_j}


class FactorGraph:
    def __init__(self):
        self.variables: dict[str, GraphVariable] = {}
        self.factors: list[Factor] = []
        # one external factor per variable: replaced on re-refinement
        self._external_index: dict[str, int] = {}

    # -- construction --------------------------------------------------------

    def add_variable(self, var_id: str, kind: str, estimate: RigidPose):
        if var_id in self.variables:
            raise GraphError(f"duplicate variable id {var_id}")
        if kind not in (ROBOT_POSE, LANDMARK_POSE):
            raise GraphError(f"unknown variable kind {kind}")
        self.variables[var_id] = GraphVariable(var_id, kind, estimate)

    def add_factor(self, factor: Factor):
        for vid in factor.var_ids:
            if vid not in self.variables:
                raise GraphError(f"factor references unknown variable {vid}")
        if factor.kind == EXTERNAL_3DGS:
            if self.variables[factor.var_ids[0]].kind != ROBOT_POSE:
                raise GraphError("external factors attach to robot poses only")
            vid = factor.var_ids[0]
            if vid in self._external_index:
                self.factors[self._external_index[vid]] = factor
                return
            self._external_index[vid] = len(self.factors)
        self.factors.append(factor)

    def add_prior(self, var_id, measurement, information, huber_k=None):
        self.add_factor(Factor(PRIOR, (var_id,), measurement, information, huber_k))

    def add_odometry(self, from_id, to_id, measurement, information, huber_k=None):
        self.add_factor(Factor(ODOMETRY, (from_id, to_id), measurement, information, huber_k))

    def add_landmark_measurement(self, pose_id, landmark_id, measurement, information,
                                 huber_k=None):
        self.add_factor(Factor(LANDMARK_MEASUREMENT, (pose_id, landmark_id),
                               measurement, information, huber_k))

    def add_external_pose_factors(self, refined: list):
        """Attach (or replace) unary factors anchoring refined poses.

        `refined` holds (var_id, pose, covariance) triples; the factor
        information is the covariance inverse.
        """
        for var_id, pose, cov in refined:
            cov = np.asarray(cov, dtype=float).reshape(6, 6)
            info = np.linalg.inv(cov)
            self.add_factor(Factor(EXTERNAL_3DGS, (var_id,), pose, info))

    def estimates(self) -> dict:
        return {vid: v.estimate for vid, v in self.variables.items()}

    def set_estimates(self, estimates: dict):
        for vid, pose in estimates.items():
            self.variables[vid].estimate = pose

    # -- gauge check -----------------------------------------------------------

    def _check_anchored(self):
        parent = {vid: vid for vid in self.variables}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for f in self.factors:
            if len(f.var_ids) == 2:
                ra, rb = find(f.var_ids[0]), find(f.var_ids[1])
                if ra != rb:
                    parent[ra] = rb
        anchored = {find(f.var_ids[0]) for f in self.factors if f.kind in _UNARY_KINDS}
        for vid in self.variables:
            if find(vid) not in anchored:
                raise GaugeFreedomError(f"variable {vid} is not anchored by any prior")

    # -- cost / linearization ---------------------------------------------------

    def total_cost(self, estimates: dict) -> float:
        cost = 0.0
        for f in self.factors:
            r, _ = residual(f, estimates)
            cost += _robust_cost(f.huber_k, float(np.linalg.norm(r)))
        return cost

    def _linearize(self, estimates: dict, order: list):
        index = {vid: i for i, vid in enumerate(order)}
        n = 6 * len(order)
        rows, cols, vals = [], [], []
        g = np.zeros(n)
        cost = 0.0
        for f in self.factors:
            r, jacs = residual(f, estimates)
            r_norm = float(np.linalg.norm(r))
            cost += _robust_cost(f.huber_k, r_norm)
            w = 1.0 if f.huber_k is None else robust_weight(f.huber_k, r_norm)
            sw = math.sqrt(w)
            r = sw * r
            items = [(index[vid], sw * J) for vid, J in jacs.items()]
            for bi, Ji in items:
                g[6 * bi: 6 * bi + 6] -= Ji.T @ r
                for bj, Jj in items:
                    block = Ji.T @ Jj
                    bi_rows = np.repeat(np.arange(6 * bi, 6 * bi + 6), 6)
                    bj_cols = np.tile(np.arange(6 * bj, 6 * bj + 6), 6)
                    rows.append(bi_rows)
                    cols.append(bj_cols)
                    vals.append(block.reshape(-1))
        H = scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n)).tocsc()
        return H, g, cost

    # -- solving ------------------------------------------------------------------

    def solve_lm(self, params: LmParams | None = None,
                 linear_solver: str = "auto") -> tuple[dict, SolveReport]:
        """Run Levenberg-Marquardt from the stored estimates.

        Returns the optimized estimates and a report; the stored estimates
        are updated in place on success or non-convergence alike.
        """
        params = params or LmParams()
        if not self.variables:
            raise GraphError("empty graph")
        self._check_anchored()
        order = list(self.variables.keys())
        estimates = self.estimates()

        lam = params.lambda_init
        H, g, cost = self._linearize(estimates, order)
        initial_cost = cost
        converged = False
        iters = 0
        for iters in range(1, params.max_iters + 1):
            if np.max(np.abs(g)) < 1e-14:
                converged = True
                break
            delta = self._solve_normal_equations(H, g, lam, len(order), linear_solver)
            if delta is None:
                lam *= params.lambda_scale
                if lam > 1e12:
                    break
                continue
            trial = {
                vid: compose(se3_exp(Twist.from_vector(delta[6 * i: 6 * i + 6])), estimates[vid])
                for i, vid in enumerate(order)
            }
            trial_cost = self.total_cost(trial)
            if trial_cost <= cost:
                decrease = cost - trial_cost
                estimates = trial
                lam = max(lam / params.lambda_scale, 1e-12)
                H, g, new_cost = self._linearize(estimates, order)
                small = decrease <= params.cost_tol * (cost + 1e-12)
                cost = new_cost
                if small:
                    converged = True
                    break
            else:
                lam *= params.lambda_scale
                if lam > 1e12:
                    break
        self.set_estimates(estimates)
        return estimates, SolveReport(initial_cost, cost, iters, converged, lam)

    def _solve_normal_equations(self, H, g, lam, n_vars, linear_solver):
        diag = np.asarray(H.diagonal())
        damp = lam * np.maximum(diag, 1e-12)
        Hd = H + scipy.sparse.diags(damp)
        use_dense = linear_solver == "dense" or (
            linear_solver == "auto" and n_vars < DENSE_SOLVE_MAX_VARIABLES)
        try:
            if use_dense:
                delta = scipy.linalg.cho_solve(scipy.linalg.cho_factor(Hd.toarray()), g)
            else:
                delta = scipy.sparse.linalg.splu(Hd.tocsc()).solve(g)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, RuntimeError):
            return None
        if not np.all(np.isfinite(delta)):
            return None
        return delta

    # -- marginals -----------------------------------------------------------------

    def marginal_covariance(self, var_id: str, estimates: dict | None = None,
                            method: str = "auto") -> np.ndarray:
        return self.marginal_covariances([var_id], estimates, method)[var_id]

    def marginal_covariances(self, var_ids: list, estimates: dict | None = None,
                             method: str = "auto") -> dict:
        """Blocks of the inverse Gauss-Newton information at the estimates."""
        estimates = estimates or self.estimates()
        order = list(self.variables.keys())
        index = {vid: i for i, vid in enumerate(order)}
        H, _, _ = self._linearize(estimates, order)
        n = H.shape[0]
        use_dense = method == "dense" or (method == "auto" and len(order) < DENSE_SOLVE_MAX_VARIABLES)
        out = {}
        if use_dense:
            try:
                Hinv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(H.toarray()), np.eye(n))
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as e:
                raise SingularInformationError("information matrix is singular") from e
            for vid in var_ids:
                b = 6 * index[vid]
                cov = Hinv[b:b + 6, b:b + 6]
                out[vid] = 0.5 * (cov + cov.T)
            return out
        try:
            lu = scipy.sparse.linalg.splu(H.tocsc())
        except RuntimeError as e:
            raise SingularInformationError("information matrix is singular") from e
        for vid in var_ids:
            b = 6 * index[vid]
            rhs = np.zeros((n, 6))
            rhs[b:b + 6, :] = np.eye(6)
            cols = lu.solve(rhs)
            if not np.all(np.isfinite(cols)):
                raise SingularInformationError("information matrix is singular")
            cov = cols[b:b + 6, :]
            out[vid] = 0.5 * (cov + cov.T)
        return out

    # -- serialization ----------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for v in self.variables.values():
            lines.append(f"VAR {v.id} {v.kind} {_pose7(v.estimate)}")
        for f in self.factors:
            info21 = " ".join(repr(float(f.information[i, j])) for i in range(6) for j in range(i, 6))
            parts = ["FACTOR", f.kind, *f.var_ids, _pose7(f.measurement), info21]
            if f.huber_k is not None:
                parts.append(repr(float(f.huber_k)))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FactorGraph":
        g = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            try:
                if tok[0] == "VAR":
                    g.add_variable(tok[1], tok[2], _parse_pose7(tok[3:10]))
                elif tok[0] == "FACTOR":
                    kind = tok[1]
                    n_ids = 1 if kind in _UNARY_KINDS else 2
                    ids = tuple(tok[2:2 + n_ids])
                    rest = tok[2 + n_ids:]
                    pose = _parse_pose7(rest[:7])
                    info_vals = [float(x) for x in rest[7:28]]
                    info = np.zeros((6, 6))
                    k = 0
                    for i in range(6):
                        for j in range(i, 6):
                            info[i, j] = info[j, i] = info_vals[k]
                            k += 1
                    huber = float(rest[28]) if len(rest) > 28 else None
                    g.add_factor(Factor(kind, ids, pose, info, huber))
                else:
                    raise GraphError(f"unknown record {tok[0]}")
            except (IndexError, ValueError) as e:
                raise GraphError(f"malformed graph line {lineno}: {raw!r}") from e
        return g


def _pose7(p: RigidPose) -> str:
    t = p.translation
    q = p.quat  # stored w,x,y,z; serialized qx qy qz qw
    return " ".join(repr(float(x)) for x in (t[0], t[1], t[2], q[1], q[2], q[3], q[0]))


def _parse_pose7(tok) -> RigidPose:
    vals = [float(x) for x in tok]
    if len(vals) != 7:
        raise ValueError("pose needs 7 values")
    tx, ty, tz, qx, qy, qz, qw = vals
    return RigidPose(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))
