"""Loop-closure detection and verification.

Candidates come from a polar ring/sector intensity descriptor combined
with an odometry-similarity term; the best candidate is refined by
registering the query scan against the candidate's submap and accepted
only if the Cauchy-Schwarz divergence between the aligned mixtures stays
below a gate threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .estimator import EstimatorConfig, register_pose
from .ndt import NdtGrid, NdtSubmap, cells_as_gmm
from .se2 import Pose2

# descriptor entries accumulate intensity / _INTENSITY_DIV per point
_INTENSITY_DIV = 20.0


class DescriptorMismatchError(ValueError):
    """Descriptors of different shapes cannot be compared."""


@dataclass
class LoopClosureConfig:
    n_ring: int = 20
    n_sector: int = 60
    max_range: float = 16.0
    w_od: float = 0.5
    min_loop_separation: float = 10.0
    gate_threshold: float = 1.0


@dataclass(slots=True)
class LoopCandidate:
    query_node: int
    candidate_node: int
    candidate_submap: int
    score: float
    d_sc: float
    d_od: float
    refined_transform: Pose2 | None = None
    divergence: float | None = None


@dataclass(slots=True)
class LoopDecision:
    accepted: bool
    candidate: LoopCandidate
    reason: str


def make_descriptor(points: np.ndarray, n_ring: int, n_sector: int, max_range: float) -> np.ndarray:
    """Ring/sector histogram of scan intensities.

    Point (r, theta, p) with r <= max_range lands in ring
    floor(r * n_ring / max_range) and sector floor(theta * n_sector / 2pi);
    each entry accumulates p / 20.
    """
    if max_range <= 0:
        raise ValueError(f"max_range must be positive, got {max_range}")
    desc = np.zeros((n_ring, n_sector))
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return desc
    r = np.hypot(pts[:, 0], pts[:, 1])
    keep = r <= max_range
    if not keep.any():
        return desc
    r = r[keep]
    theta = np.mod(np.arctan2(pts[keep, 1], pts[keep, 0]), 2.0 * math.pi)
    ring = np.minimum((r * n_ring / max_range).astype(np.intp), n_ring - 1)
    sector = np.minimum((theta * n_sector / (2.0 * math.pi)).astype(np.intp), n_sector - 1)
    np.add.at(desc, (ring, sector), pts[keep, 2] / _INTENSITY_DIV)
    return desc


def descriptor_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Min over column shifts of the mean columnwise cosine distance.

    Column pairs where either column is all-zero are excluded from the
    mean; a shift with no valid pair scores the maximum distance 1.
    """
    if a.shape != b.shape:
        raise DescriptorMismatchError(f"descriptor shapes differ: {a.shape} vs {b.shape}")
    n_sector = a.shape[1]
    dots = a.T @ b  # (S, S): dots[c1, c2]
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    cols = np.arange(n_sector)
    shifted = (cols[None, :] + cols[:, None]) % n_sector  # [s, c] -> (c + s) mod S
    num = dots[cols[None, :], shifted]
    den = na[None, :] * nb[shifted]
    valid = (na[None, :] > 0.0) & (nb[shifted] > 0.0)
    dist = np.where(valid, 1.0 - np.divide(num, den, out=np.ones_like(den), where=valid), 0.0)
    counts = valid.sum(axis=1)
    sums = dist.sum(axis=1)
    per_shift = np.where(counts > 0, sums / np.maximum(counts, 1), 1.0)
    return float(per_shift.min())


def odometry_similarity(query, cand, w_od: float = 0.5, eps: float = 1e-9) -> float:
    """Traveled-distance similarity in [0, w_od]."""
    dq = query.traveled_distance
    ratio = abs(dq - cand.traveled_distance) / max(dq, eps)
    return w_od * min(max(ratio, 0.0), 1.0)


def find_candidate(query, database, cfg: LoopClosureConfig) -> LoopCandidate | None:
    """Best-scoring eligible keyframe, or None.

    Keyframes closer than ``min_loop_separation`` in traveled distance are
    excluded so trivially recent neighbors never qualify.
    """
    best: LoopCandidate | None = None
    for node in database:
        if node.id == query.id:
            continue
        if abs(query.traveled_distance - node.traveled_distance) < cfg.min_loop_separation:
            continue
        d_sc = descriptor_distance(query.descriptor, node.descriptor)
        d_od = odometry_similarity(query, node, cfg.w_od)
        score = d_sc + d_od
        if best is None or score < best.score or (score == best.score and node.id < best.candidate_node):
            best = LoopCandidate(
                query_node=query.id,
                candidate_node=node.id,
                candidate_submap=node.submap_id,
                score=score,
                d_sc=d_sc,
                d_od=d_od,
            )
    return best


def _log_self_overlap(logw: np.ndarray, mu: np.ndarray, cov: np.ndarray) -> float:
    return _log_cross_overlap(logw, mu, cov, logw, mu, cov)


def _log_cross_overlap(logw1, mu1, cov1, logw2, mu2, cov2) -> float:
    """log integral of the product of two 2D Gaussian mixtures."""
    d = mu1[:, None, :] - mu2[None, :, :]
    s = cov1[:, None, :, :] + cov2[None, :, :, :]
    a = s[..., 0, 0]
    b = s[..., 0, 1]
    c = s[..., 1, 1]
    det = a * c - b * b
    quad = (d[..., 0] ** 2 * c - 2.0 * d[..., 0] * d[..., 1] * b + d[..., 1] ** 2 * a) / det
    log_n = -math.log(2.0 * math.pi) - 0.5 * np.log(det) - 0.5 * quad
    return float(logsumexp(logw1[:, None] + logw2[None, :] + log_n))


def cs_divergence(w1, mu1, cov1, w2, mu2, cov2) -> float:
    """Closed-form Cauchy-Schwarz divergence between two 2D GMMs.

    -log( int pq / sqrt(int p^2 int q^2) ); zero iff the mixtures define
    the same density, symmetric, non-negative up to rounding.
    """
    logw1 = np.log(np.asarray(w1, dtype=float))
    logw2 = np.log(np.asarray(w2, dtype=float))
    mu1 = np.asarray(mu1, dtype=float)
    mu2 = np.asarray(mu2, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    cov2 = np.asarray(cov2, dtype=float)
    cross = _log_cross_overlap(logw1, mu1, cov1, logw2, mu2, cov2)
    self1 = _log_self_overlap(logw1, mu1, cov1)
    self2 = _log_self_overlap(logw2, mu2, cov2)
    return -(cross - 0.5 * self1 - 0.5 * self2)


def _geometric_marginal(weights, means, covs, pose: Pose2 | None = None):
    """2D marginals of augmented cells, optionally moved by a pose."""
    mu = means[:, :2].copy()
    cov = covs[:, :2, :2].copy()
    if pose is not None:
        mu = mu @ pose.rot.T + pose.trans
        cov = np.einsum("ab,nbc,dc->nad", pose.rot, cov, pose.rot)
    return weights, mu, cov


def refine_and_gate(
    cand: LoopCandidate,
    query_scan_grid: NdtGrid,
    candidate_submap: NdtSubmap,
    est_cfg: EstimatorConfig,
    loop_cfg: LoopClosureConfig,
    seed: Pose2,
) -> LoopDecision:
    """Registration refinement followed by the divergence gate.

    The gate compares geometry-only (2D marginal) mixtures of the aligned
    query scan and the candidate submap; intensity scale differences
    between a single scan and an accumulated map would otherwise dominate.
    """
    try:
        refined, report = register_pose(query_scan_grid, candidate_submap, seed, est_cfg)
    except Exception as exc:  # no correspondences or solver breakdown
        cand.refined_transform = None
        return LoopDecision(False, cand, f"registration failed: {exc}")
    if report.degraded:
        cand.refined_transform = None
        return LoopDecision(False, cand, "registration diverged")
    cand.refined_transform = refined
    wq, mq, cq = cells_as_gmm(query_scan_grid)
    wm, mm, cm = cells_as_gmm(candidate_submap.grid)
    q2 = _geometric_marginal(wq, mq, cq, refined)
    m2 = _geometric_marginal(wm, mm, cm)
    d_cs = cs_divergence(*q2, *m2)
    cand.divergence = d_cs
    if d_cs <= loop_cfg.gate_threshold:
        return LoopDecision(True, cand, "accepted")
    return LoopDecision(False, cand, "divergence gate")
