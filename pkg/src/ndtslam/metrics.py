"""Trajectory container and accuracy metrics.

Estimates are compared against ground truth by interpolating the estimate
(in the tangent space, between the two bracketing poses) at every ground
truth timestamp; errors are direct frame differences with no global
alignment, since sessions share the start frame by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .se2 import Pose2, between, compose, exp_map, interpolate, inverse, log_map

KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class TrajectoryTooShortError(ValueError):
    pass


@dataclass(slots=True)
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose2]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if len(self.poses) != self.timestamps.size:
            raise ValueError("timestamp/pose count mismatch")
        if self.timestamps.size > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.timestamps.size

    def pose_at(self, t: float) -> Pose2:
        """Tangent-space interpolation between the bracketing poses."""
        ts = self.timestamps
        if t <= ts[0]:
            return self.poses[0].copy()
        if t >= ts[-1]:
            return self.poses[-1].copy()
        hi = int(np.searchsorted(ts, t, side="right"))
        lo = hi - 1
        s = (t - ts[lo]) / (ts[hi] - ts[lo])
        return interpolate(self.poses[lo], self.poses[hi], s)

    def path_length(self) -> float:
        if len(self) < 2:
            return 0.0
        xy = np.array([p.trans for p in self.poses])
        return float(np.sum(np.linalg.norm(np.diff(xy, axis=0), axis=1)))


def _paired(est: Trajectory, gt: Trajectory) -> tuple[list[Pose2], list[Pose2], np.ndarray]:
    """Estimate poses interpolated at every overlapping gt timestamp."""
    lo = max(est.timestamps[0], gt.timestamps[0])
    hi = min(est.timestamps[-1], gt.timestamps[-1])
    keep = (gt.timestamps >= lo) & (gt.timestamps <= hi)
    if not keep.any():
        raise ValueError("trajectories do not overlap in time")
    ts = gt.timestamps[keep]
    gt_poses = [p for p, k in zip(gt.poses, keep) if k]
    est_poses = [est.pose_at(t) for t in ts]
    return est_poses, gt_poses, ts


def ate(est: Trajectory, gt: Trajectory) -> float:
    """RMSE of translation norms of the per-pose frame differences."""
    est_poses, gt_poses, _ = _paired(est, gt)
    sq = 0.0
    for p, q in zip(est_poses, gt_poses):
        f = between(q, p)
        sq += float(f.trans @ f.trans)
    return math.sqrt(sq / len(gt_poses))


def mean_rpe(est: Trajectory, gt: Trajectory) -> tuple[float, float]:
    """Mean per-step translation error (m) and rotation error (degrees)."""
    est_poses, gt_poses, _ = _paired(est, gt)
    n = len(gt_poses)
    if n < 2:
        raise ValueError("need at least two overlapping poses")
    t_sum = 0.0
    r_sum = 0.0
    for i in range(n - 1):
        rel_gt = between(gt_poses[i], gt_poses[i + 1])
        rel_est = between(est_poses[i], est_poses[i + 1])
        e = between(rel_gt, rel_est)
        t_sum += float(np.linalg.norm(e.trans))
        r_sum += abs(e.angle)
    return t_sum / (n - 1), math.degrees(r_sum / (n - 1))


def kitti_drift(est: Trajectory, gt: Trajectory, lengths=KITTI_LENGTHS) -> tuple[float, float]:
    """Segment drift: (translation %, rotation deg per 100 m).

    Relative-pose errors over ground-truth segments of the given lengths,
    from every start pose, averaged over all evaluated segments.
    """
    est_poses, gt_poses, _ = _paired(est, gt)
    xy = np.array([p.trans for p in gt_poses])
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1) if len(gt_poses) > 1 else np.empty(0)
    dist = np.concatenate([[0.0], np.cumsum(steps)])
    if dist[-1] < min(lengths):
        raise TrajectoryTooShortError(
            f"trajectory too short: {dist[-1]:.1f} m of ground truth, need {min(lengths):.0f} m"
        )
    t_errs = []
    r_errs = []
    for start in range(len(gt_poses)):
        for seg_len in lengths:
            end = int(np.searchsorted(dist, dist[start] + seg_len, side="right"))
            if end >= len(gt_poses):
                continue
            rel_gt = between(gt_poses[start], gt_poses[end])
            rel_est = between(est_poses[start], est_poses[end])
            err = between(rel_est, rel_gt)
            t_errs.append(float(np.linalg.norm(err.trans)) / seg_len * 100.0)
            r_errs.append(math.degrees(abs(err.angle)) / (seg_len / 100.0))
    if not t_errs:
        raise TrajectoryTooShortError("no complete evaluation segment")
    return float(np.mean(t_errs)), float(np.mean(r_errs))
