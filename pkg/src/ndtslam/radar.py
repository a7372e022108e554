"""Radar scan filtering and gyro integration.

Filtered scans are returned as float arrays of shape (n, 3) with columns
``[x, y, intensity]``; downstream code treats that layout as the augmented
point type.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ImuCoverageError(RuntimeError):
    """Raised when gyro samples leave a gap larger than half the interval."""


@dataclass(slots=True)
class Beam:
    """Returns of one azimuth, ordered by strictly increasing range."""

    azimuth: float
    ranges: np.ndarray
    intensities: np.ndarray


@dataclass(slots=True)
class RadarScan:
    """One sweep; beams ordered by strictly increasing azimuth in [0, 2pi)."""

    timestamp: float
    beams: list[Beam] = field(default_factory=list)

    def n_returns(self) -> int:
        return sum(b.ranges.size for b in self.beams)


@dataclass(slots=True)
class ImuSegment:
    """Relative yaw over one scan interval."""

    delta_rotation: float
    dt: float


@dataclass(slots=True)
class FilterConfig:
    intensity_threshold: float
    min_range: float = 0.0
    max_range: float = float("inf")
    cluster_gap: float = 0.3


def _cluster_beam(r: np.ndarray, p: np.ndarray, gap: float) -> np.ndarray:
    """Indices of the cluster around the strongest surviving return.

    Grown outward from the seed on both range sides; a return joins only if
    it is within ``gap`` of the previously admitted point and not brighter
    than it. Ties on the seed intensity resolve to the smaller range.
    """
    seed = int(np.argmax(p))  # first max = smallest range on ties
    ok_pair = (np.diff(r) <= gap) & (p[1:] <= p[:-1])
    # going right from the seed the pair conditions apply as-is ...
    right = ok_pair[seed:]
    stop_r = int(np.argmin(right)) if right.size and not right.all() else right.size
    # ... going left, "previous admitted" is the higher-range neighbor
    left_ok = (np.diff(r[: seed + 1]) <= gap) & (p[:seed] <= p[1 : seed + 1])
    left_rev = left_ok[::-1]
    stop_l = int(np.argmin(left_rev)) if left_rev.size and not left_rev.all() else left_rev.size
    return np.arange(seed - stop_l, seed + stop_r + 1)


def filter_scan(scan: RadarScan, cfg: FilterConfig) -> np.ndarray:
    """Two-step scan filter: threshold/range cut, then per-beam clustering.

    Returns the union of per-beam clusters as Cartesian augmented points
    (n, 3). The output may be empty; the caller decides whether to skip.
    """
    out = []
    for beam in scan.beams:
        r, p = beam.ranges, beam.intensities
        keep = (p >= cfg.intensity_threshold) & (r >= cfg.min_range) & (r <= cfg.max_range)
        if not keep.any():
            continue
        r, p = r[keep], p[keep]
        idx = _cluster_beam(r, p, cfg.cluster_gap)
        rc, pc = r[idx], p[idx]
        pts = np.empty((rc.size, 3))
        pts[:, 0] = rc * np.cos(beam.azimuth)
        pts[:, 1] = rc * np.sin(beam.azimuth)
        pts[:, 2] = pc
        out.append(pts)
    if not out:
        return np.empty((0, 3))
    return np.concatenate(out, axis=0)


def integrate_gyro(samples: np.ndarray, t0: float, t1: float) -> ImuSegment:
    """Trapezoidal yaw-rate integral over [t0, t1].

    ``samples`` is (n, 2) with columns (timestamp, yaw_rate), timestamps
    increasing. Raises ImuCoverageError when the largest gap left by the
    samples inside the window exceeds (t1 - t0) / 2.
    """
    if t1 <= t0:
        raise ValueError(f"bad interval [{t0}, {t1}]")
    samples = np.asarray(samples, dtype=float)
    dt = t1 - t0
    ts = samples[:, 0] if samples.size else np.empty(0)
    ws = samples[:, 1] if samples.size else np.empty(0)

    inner = (ts > t0) & (ts < t1)
    t_in = ts[inner]
    gap = 0.0
    left = t_in[0] if t_in.size else t1
    right = t_in[-1] if t_in.size else t0
    if not (ts <= t0).any():
        gap = max(gap, left - t0)
    if not (ts >= t1).any():
        gap = max(gap, t1 - right)
    if t_in.size > 1:
        gap = max(gap, float(np.max(np.diff(t_in))))
    if gap > dt / 2.0:
        raise ImuCoverageError(
            f"gyro gap {gap:.6g} s exceeds half the interval {dt:.6g} s"
        )

    knots = np.concatenate(([t0], t_in, [t1]))
    rates = np.interp(knots, ts, ws)
    delta = float(np.trapezoid(rates, knots))
    return ImuSegment(delta_rotation=delta, dt=dt)
