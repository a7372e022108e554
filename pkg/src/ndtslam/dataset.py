"""Dataset directory IO.

Layout:
    scans.csv   one return per row: timestamp,azimuth_rad,range_m,intensity
    imu.csv     timestamp,yaw_rate_rad_s
    gt.tum      optional ground truth, TUM 8-column text

Floats are written with repr (shortest roundtrip form), so a load/write
cycle reproduces canonical files byte for byte.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .metrics import Trajectory
from .radar import Beam, RadarScan
from .se2 import Pose2

SCANS_HEADER = "timestamp,azimuth_rad,range_m,intensity"
IMU_HEADER = "timestamp,yaw_rate_rad_s"


class DatasetError(RuntimeError):
    """Malformed or missing dataset content, annotated with file and line."""


def _parse_rows(path: str, n_cols: int, header: str) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if lineno == 1 and line == header:
                continue
            parts = line.split(",")
            if len(parts) != n_cols:
                raise DatasetError(f"{path}:{lineno}: expected {n_cols} fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric field") from None
    return np.asarray(rows, dtype=float).reshape(-1, n_cols)


def _rows_to_scans(rows: np.ndarray, path: str) -> list[RadarScan]:
    if rows.shape[0] == 0:
        raise DatasetError(f"{path}: no scans")
    scans: list[RadarScan] = []
    boundaries = np.flatnonzero(np.diff(rows[:, 0]) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [rows.shape[0]]])
    last_t = -math.inf
    for s, e in zip(starts, ends):
        t = rows[s, 0]
        if t <= last_t:
            raise DatasetError(f"{path}: scan timestamps not strictly increasing at t={t!r}")
        last_t = t
        chunk = rows[s:e]
        az = chunk[:, 1]
        bb = np.flatnonzero(np.diff(az) != 0) + 1
        bs = np.concatenate([[0], bb])
        be = np.concatenate([bb, [chunk.shape[0]]])
        beams = []
        last_az = -math.inf
        for i, j in zip(bs, be):
            a = chunk[i, 1]
            if a <= last_az:
                raise DatasetError(f"{path}: azimuths not strictly increasing in scan t={t!r}")
            last_az = a
            r = chunk[i:j, 2]
            if r.size > 1 and not np.all(np.diff(r) > 0):
                raise DatasetError(f"{path}: ranges not strictly increasing in beam az={a!r}")
            beams.append(Beam(azimuth=float(a), ranges=r.copy(), intensities=chunk[i:j, 3].copy()))
        scans.append(RadarScan(timestamp=float(t), beams=beams))
    return scans


def load_dataset(directory: str):
    """Read (scans, imu, ground_truth); imu and ground truth may be None."""
    scans_path = os.path.join(directory, "scans.csv")
    if not os.path.exists(scans_path):
        raise DatasetError(f"{scans_path}: missing")
    scans = _rows_to_scans(_parse_rows(scans_path, 4, SCANS_HEADER), scans_path)

    imu = None
    imu_path = os.path.join(directory, "imu.csv")
    if os.path.exists(imu_path):
        imu = _parse_rows(imu_path, 2, IMU_HEADER)
        if imu.shape[0] > 1 and not np.all(np.diff(imu[:, 0]) > 0):
            raise DatasetError(f"{imu_path}: timestamps not strictly increasing")

    gt = None
    gt_path = os.path.join(directory, "gt.tum")
    if os.path.exists(gt_path):
        gt = read_tum(gt_path)
    return scans, imu, gt


def write_dataset(directory: str, scans, imu=None, ground_truth: Trajectory | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "scans.csv"), "w", encoding="utf-8") as fh:
        fh.write(SCANS_HEADER + "\n")
        for scan in scans:
            for beam in scan.beams:
                for r, p in zip(beam.ranges, beam.intensities):
                    fh.write(f"{scan.timestamp!r},{beam.azimuth!r},{float(r)!r},{float(p)!r}\n")
    if imu is not None:
        with open(os.path.join(directory, "imu.csv"), "w", encoding="utf-8") as fh:
            fh.write(IMU_HEADER + "\n")
            for t, w in np.asarray(imu, dtype=float):
                fh.write(f"{t!r},{w!r}\n")
    if ground_truth is not None:
        write_tum(os.path.join(directory, "gt.tum"), ground_truth)


def read_tum(path: str) -> Trajectory:
    """TUM 8-column trajectory; planar fields only (tz, qx, qy ignored)."""
    ts = []
    poses = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric field") from None
            t, tx, ty, _tz, _qx, _qy, qz, qw = vals
            ts.append(t)
            poses.append(Pose2.from_xytheta(tx, ty, 2.0 * math.atan2(qz, qw)))
    if not ts:
        raise DatasetError(f"{path}: empty trajectory")
    return Trajectory(np.asarray(ts), poses)


def write_tum(path: str, traj: Trajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, pose in zip(traj.timestamps, traj.poses):
            half = 0.5 * pose.angle
            qz, qw = math.sin(half), math.cos(half)
            x, y = float(pose.trans[0]), float(pose.trans[1])
            fh.write(f"{float(t)!r} {x!r} {y!r} 0.0 0.0 0.0 {qz!r} {qw!r}\n")
