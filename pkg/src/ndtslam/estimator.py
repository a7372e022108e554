"""Sliding-window motion estimation.

Jointly optimizes the last ``l`` states against three residual families:

* augmented-NDT registration of each state's scan against the submap,
  wrapped in the annealed adaptive robust loss (one scalar residual per
  correspondence, square-rooted so the least-squares objective equals the
  robust cost exactly),
* a constant-velocity motion model between consecutive states,
* relative-yaw gyro measurements with a random-walk bias.

Solved by Levenberg-Marquardt over a coarse-to-fine schedule of the loss
scale control; state increments live in the tangent space (pose updated
multiplicatively, velocity and bias additively).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .ndt import NdtCell, NdtGrid, NdtSubmap, nearest_distributions
from .radar import ImuSegment
from .se2 import (
    Pose2,
    Twist2,
    adjoint,
    between,
    compose,
    exp_map,
    inverse,
    jac_left_inv,
    jac_right,
    jac_right_inv,
    log_map,
    wrap_angle,
)

_GRAD_TOL = 1e-8
_STEP_TOL = 1e-10
_LAMBDA_INIT = 1e-4
_LAMBDA_MAX = 1e10


class NoCorrespondencesError(RuntimeError):
    """No usable scan/submap correspondences; the scan must be skipped."""


@dataclass(slots=True)
class WindowState:
    """Per-scan state: pose in the submap frame, body velocity, gyro bias."""

    pose: Pose2
    velocity: Twist2
    bias: float
    timestamp: float

    def copy(self) -> "WindowState":
        return WindowState(self.pose.copy(), Twist2(self.velocity.vx, self.velocity.vy, self.velocity.omega), self.bias, self.timestamp)


def _default_omega_mm() -> np.ndarray:
    return np.diag([25.0, 25.0, 50.0, 10.0, 10.0, 20.0])


def _default_omega_imu() -> np.ndarray:
    return np.diag([400.0, 100.0])


@dataclass
class EstimatorConfig:
    window_length: int = 3
    alpha: float = -2.0
    c: float = 1.5
    mu0: float = 16.0
    k_mu: float = 4.0
    w_ndt: float = 10.0
    omega_mm: np.ndarray = field(default_factory=_default_omega_mm)
    omega_imu: np.ndarray = field(default_factory=_default_omega_imu)
    k_neighbors: int = 4
    max_lm_iterations: int = 25

    def schedule(self) -> list[float]:
        return losses.anneal_schedule(self.mu0, self.k_mu)


@dataclass
class RobustLossConfig:
    """Loss parameters of the registration residuals.

    d1 and d2 are the classic positive regularizers of the exponential
    score; they are subsumed here (d1 folds into the registration weight,
    d2 into 1/c^2) and kept only so configurations written against the
    older parameterization remain readable.
    """

    alpha: float
    c: float
    mu: float = 1.0
    d1: float = 1.0
    d2: float = 1.0


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    lam, u = np.linalg.eigh(np.asarray(m, dtype=float))
    lam = np.clip(lam, 0.0, None)
    return (u * np.sqrt(lam)) @ u.T


def _augment_rotation(rot: np.ndarray) -> np.ndarray:
    r3 = np.eye(3)
    r3[:2, :2] = rot
    return r3


def _solve3_sym(s: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched solve of symmetric 3x3 systems via the adjugate.

    Returns (h, det). Raises if any system is not positive definite, which
    indicates broken covariance regularization upstream.
    """
    a, b, c = s[:, 0, 0], s[:, 0, 1], s[:, 0, 2]
    d, e, f = s[:, 1, 1], s[:, 1, 2], s[:, 2, 2]
    ca = d * f - e * e
    cb = c * e - b * f
    cc = b * e - c * d
    cd = a * f - c * c
    ce = b * c - a * e
    cf = a * d - b * b
    det = a * ca + b * cb + c * cc
    if np.any(det <= 0.0) or not np.all(np.isfinite(det)):
        raise RuntimeError("combined NDT covariance is not positive definite; regularization bug")
    h = np.empty_like(g)
    h[:, 0] = (ca * g[:, 0] + cb * g[:, 1] + cc * g[:, 2]) / det
    h[:, 1] = (cb * g[:, 0] + cd * g[:, 1] + ce * g[:, 2]) / det
    h[:, 2] = (cc * g[:, 0] + ce * g[:, 1] + cf * g[:, 2]) / det
    return h, det


def ndt_residual(scan_cell: NdtCell, map_cell: NdtCell, pose: Pose2) -> float:
    """Squared Mahalanobis distance between two augmented cells under a pose.

    The scan cell is moved by the augmented form of the pose (rotation in
    the upper-left 2x2, unit intensity row/column, translation padded with
    a zero) and compared against the map cell with the combined rotated
    covariance as the metric.
    """
    r3 = _augment_rotation(pose.rot)
    t3 = np.array([pose.trans[0], pose.trans[1], 0.0])
    g = r3 @ scan_cell.mean + t3 - map_cell.mean
    s = map_cell.regularized_covariance() + r3 @ scan_cell.regularized_covariance() @ r3.T
    h, _ = _solve3_sym(s[None, :, :], g[None, :])
    return float(g @ h[0])


def motion_cost(prev: WindowState, cur: WindowState, omega_mm: np.ndarray) -> float:
    """Squared Mahalanobis norm of the constant-velocity prediction error."""
    dt = cur.timestamp - prev.timestamp
    predicted = compose(prev.pose, exp_map(prev.velocity.as_array() * dt))
    z = log_map(between(predicted, cur.pose)).as_array()
    e = np.concatenate([z, cur.velocity.as_array() - prev.velocity.as_array()])
    return float(e @ omega_mm @ e)


def imu_cost(prev: WindowState, cur: WindowState, seg: ImuSegment, omega_imu: np.ndarray) -> float:
    """Squared Mahalanobis norm of the relative-yaw and bias-walk errors."""
    phi = wrap_angle(
        cur.pose.angle - prev.pose.angle - seg.delta_rotation - prev.bias * seg.dt
    )
    e = np.array([phi, cur.bias - prev.bias])
    return float(e @ omega_imu @ e)


class Problem:
    """Residual bookkeeping for one window solve.

    Holds working copies of the states; ``solve`` mutates those and the
    caller reads the result back through ``updated_states``.
    """

    def __init__(self, window, scan_grids, submap: NdtSubmap, imu_segments, cfg: EstimatorConfig):
        if len(window) == 0:
            raise ValueError("empty window")
        if len(imu_segments) != len(window) - 1:
            raise ValueError("need one IMU segment slot per consecutive state pair")
        self.cfg = cfg
        self.poses: list[Pose2] = [s.pose.copy() for s in window]
        self.vels = np.array([s.velocity.as_array() for s in window])
        self.biases = np.array([float(s.bias) for s in window])
        self.times = [s.timestamp for s in window]
        self.n = len(window)
        self.map_view = submap.grid.usable_view()
        self.map_grid = submap.grid
        self.scan_views = [g.usable_view() if g is not None and len(g.usable_view()) else None for g in scan_grids]
        self.segments = list(imu_segments)
        self.w_mm = _sqrtm_psd(cfg.omega_mm)
        use_imu = not np.allclose(cfg.omega_imu, 0.0)
        self.w_imu = _sqrtm_psd(cfg.omega_imu) if use_imu else None
        # correspondences: per state, (scan_row_idx, map_row_idx) flat arrays
        self.pairs: list[tuple[np.ndarray, np.ndarray] | None] = [None] * self.n
        self.n_correspondences = 0
        # per-state scan radius: rotation-to-displacement lever arm for the
        # stale-association test
        self.scan_radii = [
            float(np.max(np.linalg.norm(v.means[:, :2], axis=1))) if v is not None else 0.0
            for v in self.scan_views
        ]
        self._refresh_poses: list[Pose2] | None = None

    def refresh_correspondences(self) -> None:
        """Re-select k nearest submap cells for every scan cell."""
        k = self.cfg.k_neighbors
        total = 0
        for i, view in enumerate(self.scan_views):
            if view is None or len(self.map_view) == 0:
                self.pairs[i] = None
                continue
            pose = self.poses[i]
            moved = view.means[:, :2] @ pose.rot.T + pose.trans
            scan_rows = []
            map_rows = []
            rows = self.map_view.rows
            for srow in range(moved.shape[0]):
                hits = nearest_distributions(self.map_grid, moved[srow], k)
                for key in hits:
                    scan_rows.append(srow)
                    map_rows.append(rows[key])
            if scan_rows:
                self.pairs[i] = (np.array(scan_rows, dtype=np.intp), np.array(map_rows, dtype=np.intp))
                total += len(scan_rows)
            else:
                self.pairs[i] = None
        self.n_correspondences = total
        self._refresh_poses = [p.copy() for p in self.poses]

    def associations_stale(self, fraction: float = 0.25) -> bool:
        """True once some pose moved a cell fraction since the last refresh."""
        if self._refresh_poses is None:
            return True
        limit = fraction * self.map_grid.resolution
        for i in range(self.n):
            if self.scan_views[i] is None:
                continue
            d = log_map(between(self._refresh_poses[i], self.poses[i])).as_array()
            moved = math.hypot(d[0], d[1]) + abs(d[2]) * self.scan_radii[i]
            if moved > limit:
                return True
        return False

    # --- residual assembly -------------------------------------------------

    def _ndt_block(self, i: int, mu: float, with_jac: bool):
        view = self.scan_views[i]
        pair = self.pairs[i]
        if view is None or pair is None:
            return None
        srows, mrows = pair
        cfg = self.cfg
        pose = self.poses[i]
        r3 = _augment_rotation(pose.rot)
        t3 = np.array([pose.trans[0], pose.trans[1], 0.0])
        ms = view.means[srows]
        cs = view.covariances[srows]
        mm = self.map_view.means[mrows]
        cm = self.map_view.covariances[mrows]
        g = ms @ r3.T + t3 - mm
        s = cm + np.einsum("ab,nbc,dc->nad", r3, cs, r3)
        h, _ = _solve3_sym(s, g)
        r2 = np.einsum("ni,ni->n", g, h)
        kappa = cfg.w_ndt / len(srows)
        rho = losses.adaptive_loss(r2, cfg.alpha, cfg.c, mu)
        u = np.sqrt(np.maximum(kappa * rho, 0.0))
        if not with_jac:
            return u, None
        # d r2 / d delta  (right perturbation of the pose)
        hgeo = h[:, :2]
        dxy = 2.0 * (hgeo @ pose.rot)
        jmu = np.stack([-ms[:, 1], ms[:, 0]], axis=1)  # rotation generator on the scan mean
        term1 = 2.0 * np.einsum("ni,ni->n", hgeo, jmu @ pose.rot.T)
        hr = h @ r3  # = R~^T h per row
        w = np.einsum("nij,nj->ni", cs, hr)
        term2 = 2.0 * (hr[:, 1] * w[:, 0] - hr[:, 0] * w[:, 1])
        dth = term1 - term2
        dr2 = np.column_stack([dxy, dth])
        grad = losses.adaptive_loss_grad(r2, cfg.alpha, cfg.c, mu)
        coef = np.where(u > 1e-12, kappa * grad / np.maximum(2.0 * u, 1e-300), 0.0)
        return u, coef[:, None] * dr2

    def _motion_block(self, i: int, with_jac: bool):
        """Whitened motion residual between states i-1 and i."""
        dt = self.times[i] - self.times[i - 1]
        v_prev = self.vels[i - 1]
        w_vec = v_prev * dt
        exp_w = exp_map(w_vec)
        g_rel = between(self.poses[i - 1], self.poses[i])
        z = log_map(compose(inverse(exp_w), g_rel)).as_array()
        e = np.concatenate([z, self.vels[i] - v_prev])
        r = self.w_mm @ e
        if not with_jac:
            return r, None
        jri = jac_right_inv(z)
        j_pose_cur = jri
        j_pose_prev = -jac_left_inv(z) @ adjoint(inverse(exp_w))
        j_v_prev = -dt * jri @ adjoint(inverse(g_rel)) @ jac_right(-w_vec)
        jac = {
            ("pose", i): self.w_mm[:, :3] @ j_pose_cur,
            ("pose", i - 1): self.w_mm[:, :3] @ j_pose_prev,
            ("vel", i): self.w_mm[:, 3:6],
            ("vel", i - 1): self.w_mm[:, :3] @ j_v_prev - self.w_mm[:, 3:6],
        }
        return r, jac

    def _imu_block(self, i: int, with_jac: bool):
        seg = self.segments[i - 1]
        if seg is None or self.w_imu is None:
            return None
        phi = wrap_angle(
            self.poses[i].angle - self.poses[i - 1].angle - seg.delta_rotation - self.biases[i - 1] * seg.dt
        )
        e = np.array([phi, self.biases[i] - self.biases[i - 1]])
        r = self.w_imu @ e
        if not with_jac:
            return r, None
        # raw rows: [d phi; d bias-walk] over (theta_prev, theta_cur, b_prev, b_cur)
        raw = np.array([[-1.0, 1.0, -seg.dt, 0.0], [0.0, 0.0, -1.0, 1.0]])
        return r, self.w_imu @ raw

    def n_params(self) -> int:
        return 7 * self.n

    def residuals(self, mu: float, with_jac: bool):
        """Stacked whitened residual vector (and dense Jacobian)."""
        rows: list[np.ndarray] = []
        jacs: list[tuple[int, np.ndarray, dict | np.ndarray | None]] = []
        n_rows = 0
        ndt_blocks = []
        for i in range(self.n):
            blk = self._ndt_block(i, mu, with_jac)
            ndt_blocks.append(blk)
            if blk is not None:
                n_rows += blk[0].shape[0]
        n_motion = self.n - 1
        n_imu = sum(
            1 for i in range(1, self.n) if self.segments[i - 1] is not None and self.w_imu is not None
        )
        n_rows += 6 * n_motion + 2 * n_imu
        r = np.empty(n_rows)
        jac = np.zeros((n_rows, self.n_params())) if with_jac else None
        at = 0
        for i in range(self.n):
            blk = ndt_blocks[i]
            if blk is None:
                continue
            u, dj = blk
            m = u.shape[0]
            r[at : at + m] = u
            if with_jac:
                jac[at : at + m, 7 * i : 7 * i + 3] = dj
            at += m
        for i in range(1, self.n):
            rm, jm = self._motion_block(i, with_jac)
            r[at : at + 6] = rm
            if with_jac:
                jac[at : at + 6, 7 * i : 7 * i + 3] = jm[("pose", i)]
                jac[at : at + 6, 7 * (i - 1) : 7 * (i - 1) + 3] = jm[("pose", i - 1)]
                jac[at : at + 6, 7 * i + 3 : 7 * i + 6] = jm[("vel", i)]
                jac[at : at + 6, 7 * (i - 1) + 3 : 7 * (i - 1) + 6] = jm[("vel", i - 1)]
            at += 6
        for i in range(1, self.n):
            blk = self._imu_block(i, with_jac)
            if blk is None:
                continue
            ri, ji = blk
            r[at : at + 2] = ri
            if with_jac:
                jac[at : at + 2, 7 * (i - 1) + 2] = ji[:, 0]
                jac[at : at + 2, 7 * i + 2] = ji[:, 1]
                jac[at : at + 2, 7 * (i - 1) + 6] = ji[:, 2]
                jac[at : at + 2, 7 * i + 6] = ji[:, 3]
            at += 2
        return r, jac

    def cost(self, mu: float) -> float:
        r, _ = self.residuals(mu, with_jac=False)
        return float(r @ r)

    def apply_step(self, delta: np.ndarray) -> None:
        for i in range(self.n):
            d = delta[7 * i : 7 * (i + 1)]
            self.poses[i] = compose(self.poses[i], exp_map(d[:3]))
            self.vels[i] += d[3:6]
            self.biases[i] += d[6]

    def snapshot(self):
        return ([p.copy() for p in self.poses], self.vels.copy(), self.biases.copy())

    def restore(self, snap) -> None:
        self.poses = [p.copy() for p in snap[0]]
        self.vels = snap[1].copy()
        self.biases = snap[2].copy()

    def updated_states(self) -> list[WindowState]:
        return [
            WindowState(self.poses[i].copy(), Twist2.from_array(self.vels[i]), float(self.biases[i]), self.times[i])
            for i in range(self.n)
        ]


@dataclass(slots=True)
class SolveReport:
    final_cost: float
    iterations: list[int]
    n_correspondences: int
    degraded: bool = False
    message: str = ""


def build_problem(window, scan_grids, submap: NdtSubmap, imu_segments, cfg: EstimatorConfig) -> Problem:
    """Assemble the window problem and select initial correspondences."""
    if len(window) > cfg.window_length:
        raise ValueError(f"window of {len(window)} exceeds configured length {cfg.window_length}")
    problem = Problem(window, scan_grids, submap, imu_segments, cfg)
    problem.refresh_correspondences()
    if problem.n_correspondences == 0 and any(v is not None for v in problem.scan_views):
        raise NoCorrespondencesError("no usable scan/submap correspondences")
    return problem


def solve(problem: Problem, schedule: list[float] | None = None) -> tuple[list[WindowState], SolveReport]:
    """Annealed Levenberg-Marquardt over the window.

    Correspondences are re-selected at the start of every scale stage; a
    cost increase across a stage (only possible through numerical failure)
    degrades to the prediction and flags the result.
    """
    cfg = problem.cfg
    if schedule is None:
        schedule = cfg.schedule()
    initial = problem.snapshot()
    iterations: list[int] = []
    for mu in schedule:
        problem.refresh_correspondences()
        lam = _LAMBDA_INIT
        # baseline of the current association epoch; re-pairing re-baselines,
        # LM acceptance keeps the cost monotone within an epoch
        baseline = problem.cost(mu)
        cost = baseline
        n_iter = 0
        while n_iter < cfg.max_lm_iterations:
            n_iter += 1
            r, jac = problem.residuals(mu, with_jac=True)
            grad = jac.T @ r
            if np.linalg.norm(grad) < _GRAD_TOL:
                break
            h = jac.T @ jac
            diag = np.maximum(np.diag(h), 1e-12)
            accepted = False
            while lam <= _LAMBDA_MAX:
                try:
                    delta = np.linalg.solve(h + lam * np.diag(diag), -grad)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                if np.linalg.norm(delta) < _STEP_TOL:
                    break
                snap = problem.snapshot()
                problem.apply_step(delta)
                trial = problem.cost(mu)
                if np.isfinite(trial) and trial < cost:
                    cost = trial
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    break
                problem.restore(snap)
                lam *= 10.0
            if accepted and problem.associations_stale():
                # the pose outran the associations; re-pair and re-baseline
                problem.refresh_correspondences()
                cost = problem.cost(mu)
                baseline = cost
            if not accepted:
                break
        iterations.append(n_iter)
        if not np.isfinite(cost) or cost > baseline + 1e-12:
            problem.restore(initial)
            return problem.updated_states(), SolveReport(
                final_cost=float("nan"),
                iterations=iterations,
                n_correspondences=problem.n_correspondences,
                degraded=True,
                message="solver diverged",
            )
    report = SolveReport(
        final_cost=problem.cost(1.0),
        iterations=iterations,
        n_correspondences=problem.n_correspondences,
    )
    return problem.updated_states(), report


def register_pose(
    scan_grid: NdtGrid,
    submap: NdtSubmap,
    initial: Pose2,
    cfg: EstimatorConfig,
) -> tuple[Pose2, SolveReport]:
    """Single-pose registration of one scan NDT against a submap.

    Same annealed loss and solver as the window problem, with only the NDT
    residuals active. Used for standalone alignment and loop refinement.
    """
    state = WindowState(initial.copy(), Twist2(0.0, 0.0, 0.0), 0.0, 0.0)
    problem = build_problem([state], [scan_grid], submap, [], cfg)
    states, report = solve(problem)
    return states[0].pose, report
