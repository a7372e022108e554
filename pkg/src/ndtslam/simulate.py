"""Synthetic radar worlds with exact ground truth.

A world is a set of reflective wall segments, a waypoint path the robot
follows at constant speed, and a sensor model. Each beam ray-casts
against the walls; the first hit produces a small cluster of returns whose
strongest return sits exactly on the wall, so zero-noise worlds give exact
geometry. Everything is driven by one seeded generator, making datasets
reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .metrics import Trajectory
from .radar import Beam, RadarScan
from .se2 import Pose2, between

# in-cluster return spacing and intensity falloff per step away from the peak
_CLUSTER_SPACING = 0.08
_CLUSTER_FALLOFF = 0.15


@dataclass(slots=True)
class Wall:
    x1: float
    y1: float
    x2: float
    y2: float
    reflectivity: float
    sigma: float


@dataclass(slots=True)
class SensorModel:
    beam_count: int = 360
    range_noise_sigma: float = 0.0
    intensity_noise_sigma: float = 0.0
    max_range: float = 16.0
    clutter_rate: float = 0.0
    clutter_intensity_max: float = 60.0


@dataclass
class SyntheticWorld:
    walls: list[Wall] = field(default_factory=list)
    waypoints: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    sensor: SensorModel = field(default_factory=SensorModel)
    speed: float = 0.5
    scan_rate: float = 5.0
    imu_rate: float = 100.0
    gyro_bias: float = 0.0
    gyro_noise_sigma: float = 0.0
    duration: float | None = None


class _Path:
    """Arc-length spline through the waypoints, constant speed."""

    def __init__(self, waypoints: np.ndarray, speed: float):
        wp = np.asarray(waypoints, dtype=float).reshape(-1, 2)
        self.speed = float(speed)
        if wp.shape[0] < 2:
            self.static = wp[0] if wp.shape[0] else np.zeros(2)
            self.total = 0.0
            self.spline = None
            return
        chord = np.linalg.norm(np.diff(wp, axis=0), axis=1)
        s = np.concatenate([[0.0], np.cumsum(chord)])
        k = min(3, wp.shape[0] - 1)
        self.spline = make_interp_spline(s, wp, k=k)
        self.d1 = self.spline.derivative(1)
        self.d2 = self.spline.derivative(2) if k >= 2 else None
        self.total = float(s[-1])
        self.static = None

    def duration(self) -> float:
        if self.total == 0.0 or self.speed == 0.0:
            return 0.0
        return self.total / self.speed

    def pose(self, t: float) -> Pose2:
        if self.spline is None:
            return Pose2.from_xytheta(self.static[0], self.static[1], 0.0)
        s = min(max(self.speed * t, 0.0), self.total)
        xy = self.spline(s)
        dx, dy = self.d1(s)
        return Pose2.from_xytheta(xy[0], xy[1], math.atan2(dy, dx))

    def yaw_rate(self, t: float) -> float:
        if self.spline is None or self.d2 is None:
            return 0.0
        s = self.speed * t
        if s <= 0.0 or s >= self.total:
            return 0.0
        d1 = self.d1(s)
        d2 = self.d2(s)
        denom = d1[0] ** 2 + d1[1] ** 2
        if denom < 1e-12:
            return 0.0
        return float((d1[0] * d2[1] - d1[1] * d2[0]) / denom * self.speed)


@dataclass(slots=True)
class SimulatedData:
    scans: list[RadarScan]
    imu: np.ndarray  # (n, 2): timestamp, yaw rate
    ground_truth: Trajectory


def _raycast(origin: np.ndarray, phis: np.ndarray, walls: list[Wall], max_range: float):
    """First wall hit per ray: (range, wall index), -1 where nothing hit."""
    n = phis.size
    if not walls:
        return np.full(n, np.inf), np.full(n, -1)
    d = np.stack([np.cos(phis), np.sin(phis)], axis=1)  # (n, 2)
    a = np.array([[w.x1, w.y1] for w in walls])
    e = np.array([[w.x2 - w.x1, w.y2 - w.y1] for w in walls])
    ao = a[None, :, :] - origin[None, None, :]
    denom = d[:, None, 0] * e[None, :, 1] - d[:, None, 1] * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (ao[:, :, 0] * e[None, :, 1] - ao[:, :, 1] * e[None, :, 0]) / denom
        u = (ao[:, :, 0] * d[:, None, 1] - ao[:, :, 1] * d[:, None, 0]) / denom
    valid = (np.abs(denom) > 1e-12) & (u >= 0.0) & (u <= 1.0) & (t > 1e-9) & (t <= max_range)
    t = np.where(valid, t, np.inf)
    idx = np.argmin(t, axis=1)
    best = t[np.arange(n), idx]
    return best, np.where(np.isfinite(best), idx, -1)


def simulate(world: SyntheticWorld, seed: int, duration: float | None = None) -> SimulatedData:
    """Generate a dataset plus exact ground truth, deterministic per seed."""
    rng = np.random.default_rng(seed)
    path = _Path(world.waypoints, world.speed)
    if duration is None:
        duration = world.duration if world.duration is not None else path.duration()
    if duration <= 0.0:
        duration = 1.0
    sensor = world.sensor
    n_scans = int(math.floor(duration * world.scan_rate)) + 1
    scan_times = np.arange(n_scans) / world.scan_rate
    azimuths = 2.0 * math.pi * np.arange(sensor.beam_count) / sensor.beam_count

    scans = []
    gt_poses = []
    for t in scan_times:
        pose = path.pose(float(t))
        gt_poses.append(pose)
        phis = pose.angle + azimuths
        hits, widx = _raycast(pose.trans, phis, world.walls, sensor.max_range)
        hit_mask = np.isfinite(hits)
        n_hit = int(hit_mask.sum())
        n_ret = rng.integers(3, 6, size=n_hit)
        peak_noise = rng.normal(0.0, 1.0, size=n_hit)
        clutter_mask = rng.random(sensor.beam_count) < sensor.clutter_rate
        n_clut = int(clutter_mask.sum())
        clut_range = rng.uniform(0.5, sensor.max_range, size=n_clut)
        clut_intensity = rng.uniform(0.0, sensor.clutter_intensity_max, size=n_clut)

        beams = []
        hit_at = 0
        clut_at = 0
        for b in range(sensor.beam_count):
            ranges = []
            intens = []
            if hit_mask[b]:
                wall = world.walls[int(widx[b])]
                m = int(n_ret[hit_at])
                offs = (np.arange(m) - (m - 1) // 2) * _CLUSTER_SPACING
                rr = hits[b] + offs
                peak = wall.reflectivity + wall.sigma * peak_noise[hit_at]
                ii = peak * (1.0 - _CLUSTER_FALLOFF * np.abs(np.arange(m) - (m - 1) // 2))
                if sensor.range_noise_sigma > 0.0:
                    rr = rr + rng.normal(0.0, sensor.range_noise_sigma, size=m)
                if sensor.intensity_noise_sigma > 0.0:
                    ii = ii + rng.normal(0.0, sensor.intensity_noise_sigma, size=m)
                ranges.extend(rr.tolist())
                intens.extend(ii.tolist())
                hit_at += 1
            if clutter_mask[b]:
                ranges.append(float(clut_range[clut_at]))
                intens.append(float(clut_intensity[clut_at]))
                clut_at += 1
            if not ranges:
                continue
            r = np.asarray(ranges)
            i = np.clip(np.asarray(intens), 0.0, None)
            order = np.argsort(r, kind="stable")
            r, i = r[order], i[order]
            keep = np.concatenate([[True], np.diff(r) > 1e-9])
            r, i = r[keep], i[keep]
            r = np.clip(r, 1e-6, None)
            beams.append(Beam(azimuth=float(azimuths[b]), ranges=r, intensities=i))
        scans.append(RadarScan(timestamp=float(t), beams=beams))

    n_imu = int(math.floor(duration * world.imu_rate)) + 2
    imu_t = np.arange(n_imu) / world.imu_rate
    rates = np.array([path.yaw_rate(float(t)) for t in imu_t])
    rates = rates + world.gyro_bias
    if world.gyro_noise_sigma > 0.0:
        rates = rates + rng.normal(0.0, world.gyro_noise_sigma, size=n_imu)
    imu = np.column_stack([imu_t, rates])

    # ground truth in the start frame, so estimates (anchored at the first
    # scan) and truth share their origin by construction
    start = gt_poses[0]
    gt = Trajectory(scan_times, [between(start, p) for p in gt_poses])
    return SimulatedData(scans=scans, imu=imu, ground_truth=gt)


_SCALAR_KEYS = {
    "beams": ("sensor", "beam_count", int),
    "range_noise_sigma": ("sensor", "range_noise_sigma", float),
    "intensity_noise_sigma": ("sensor", "intensity_noise_sigma", float),
    "max_range": ("sensor", "max_range", float),
    "clutter_rate": ("sensor", "clutter_rate", float),
    "clutter_intensity_max": ("sensor", "clutter_intensity_max", float),
    "speed": (None, "speed", float),
    "scan_rate": (None, "scan_rate", float),
    "imu_rate": (None, "imu_rate", float),
    "gyro_bias": (None, "gyro_bias", float),
    "gyro_noise_sigma": (None, "gyro_noise_sigma", float),
    "duration": (None, "duration", float),
}


def load_world(path: str) -> SyntheticWorld:
    """Parse a world description file: `key = value` plus wall/waypoint lines."""
    world = SyntheticWorld()
    waypoints = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected `key = value`")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                if key == "wall":
                    vals = [float(v) for v in value.split()]
                    if len(vals) != 6:
                        raise ValueError("wall needs x1 y1 x2 y2 reflectivity sigma")
                    world.walls.append(Wall(*vals))
                elif key == "waypoint":
                    vals = [float(v) for v in value.split()]
                    if len(vals) != 2:
                        raise ValueError("waypoint needs x y")
                    waypoints.append(vals)
                elif key in _SCALAR_KEYS:
                    section, attr, cast = _SCALAR_KEYS[key]
                    target = getattr(world, section) if section else world
                    setattr(target, attr, cast(value))
                else:
                    raise ValueError(f"unknown key {key!r}")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if waypoints:
        world.waypoints = np.asarray(waypoints, dtype=float)
    return world
