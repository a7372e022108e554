"""Full SLAM session: filtering, window estimation, submaps, loop closure.

Scans enter one at a time. Each scan is filtered, turned into its own NDT,
appended to the sliding window, and the window is re-optimized. A state
leaving the window has its scan inserted into the active submap at its
final pose; departures that moved far enough since the last keyframe
become pose-graph nodes and trigger a loop search. Accepted loops optimize
the graph and the corrected submap root poses flow back to the front end.

Everything runs on the calling thread; with a fixed seed the whole session
is bit-for-bit reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import losses
from .estimator import (
    EstimatorConfig,
    NoCorrespondencesError,
    WindowState,
    build_problem,
    solve,
)
from .loop_closure import LoopClosureConfig, find_candidate, make_descriptor, refine_and_gate
from .metrics import Trajectory
from .ndt import NdtGrid, NdtSubmap, build_ndt, insert_scan
from .pose_graph import KeyframeNode, PoseGraph, PoseGraphConfig, propagate_correction
from .radar import FilterConfig, ImuCoverageError, ImuSegment, RadarScan, filter_scan, integrate_gyro
from .se2 import Pose2, Twist2, between, compose, exp_map, inverse, log_map


class ConfigError(ValueError):
    """Unknown or malformed session configuration key."""


@dataclass
class SessionConfig:
    name: str
    filter: FilterConfig
    resolution: float
    scan_resolution: float
    min_points: int
    estimator: EstimatorConfig
    loop: LoopClosureConfig
    graph: PoseGraphConfig
    keyframe_translation: float = 0.5
    keyframe_rotation_deg: float = 10.0
    max_keyframes_per_submap: int = 10
    use_loop_closure: bool = True


def preset(name: str) -> SessionConfig:
    """Named parameter bundles; indoor/outdoor/mixed differ mainly in map
    resolution and loss shape/scale, the large-scale variant also raises the
    intensity threshold for sensors reporting higher intensity values."""
    if name == "indoor":
        return SessionConfig(
            name=name,
            filter=FilterConfig(intensity_threshold=40.0, min_range=0.3, max_range=16.0, cluster_gap=0.3),
            resolution=0.5,
            scan_resolution=0.5,
            min_points=3,
            estimator=EstimatorConfig(alpha=-2.0, c=1.5),
            loop=LoopClosureConfig(max_range=16.0),
            graph=PoseGraphConfig(),
        )
    if name == "outdoor":
        return SessionConfig(
            name=name,
            filter=FilterConfig(intensity_threshold=25.0, min_range=0.5, max_range=40.0, cluster_gap=1.0),
            resolution=1.2,
            scan_resolution=1.2,
            min_points=3,
            estimator=EstimatorConfig(alpha=-1.0, c=2.0),
            loop=LoopClosureConfig(max_range=40.0),
            graph=PoseGraphConfig(),
        )
    if name == "mixed":
        return SessionConfig(
            name=name,
            filter=FilterConfig(intensity_threshold=30.0, min_range=0.3, max_range=40.0, cluster_gap=1.0),
            resolution=1.0,
            scan_resolution=1.0,
            min_points=3,
            estimator=EstimatorConfig(alpha=-1.5, c=2.0),
            loop=LoopClosureConfig(max_range=40.0),
            graph=PoseGraphConfig(),
        )
    if name == "oxford":
        cfg = preset("outdoor")
        cfg.name = name
        cfg.filter = replace(cfg.filter, intensity_threshold=70.0, max_range=100.0)
        cfg.resolution = 3.5
        cfg.scan_resolution = 3.5
        cfg.loop = replace(cfg.loop, max_range=100.0)
        cfg.max_keyframes_per_submap = 5
        return cfg
    raise ConfigError(f"unknown preset {name!r}")


def _diag(values: list[float], n: int, key: str) -> np.ndarray:
    if len(values) != n:
        raise ConfigError(f"{key} needs {n} diagonal values, got {len(values)}")
    return np.diag(values)


def _parse_bool(v: str) -> bool:
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def apply_config_entry(cfg: SessionConfig, key: str, value: str) -> None:
    """Apply one namespaced `key = value` override; unknown keys are errors."""
    scalar = {
        "frontend.intensity_threshold": ("filter", "intensity_threshold", float),
        "frontend.min_range": ("filter", "min_range", float),
        "frontend.max_range": ("filter", "max_range", float),
        "frontend.cluster_gap": ("filter", "cluster_gap", float),
        "ndt.resolution": (None, "resolution", float),
        "ndt.scan_resolution": (None, "scan_resolution", float),
        "ndt.min_points": (None, "min_points", int),
        "estimator.window_length": ("estimator", "window_length", int),
        "estimator.alpha": ("estimator", "alpha", float),
        "estimator.c": ("estimator", "c", float),
        "estimator.mu0": ("estimator", "mu0", float),
        "estimator.k_mu": ("estimator", "k_mu", float),
        "estimator.w_ndt": ("estimator", "w_ndt", float),
        "estimator.k_neighbors": ("estimator", "k_neighbors", int),
        "estimator.max_lm_iterations": ("estimator", "max_lm_iterations", int),
        "loop.n_ring": ("loop", "n_ring", int),
        "loop.n_sector": ("loop", "n_sector", int),
        "loop.max_range": ("loop", "max_range", float),
        "loop.w_od": ("loop", "w_od", float),
        "loop.min_loop_separation": ("loop", "min_loop_separation", float),
        "loop.gate_threshold": ("loop", "gate_threshold", float),
        "graph.max_iterations": ("graph", "max_iterations", int),
        "pipeline.keyframe_translation": (None, "keyframe_translation", float),
        "pipeline.keyframe_rotation_deg": (None, "keyframe_rotation_deg", float),
        "pipeline.max_keyframes_per_submap": (None, "max_keyframes_per_submap", int),
        "pipeline.use_loop_closure": (None, "use_loop_closure", _parse_bool),
    }
    diagonal = {
        "estimator.omega_mm": ("estimator", "omega_mm", 6),
        "estimator.omega_imu": ("estimator", "omega_imu", 2),
        "graph.omega_odometry": ("graph", "omega_odometry", 3),
        "graph.omega_loop": ("graph", "omega_loop", 3),
    }
    try:
        if key in scalar:
            section, attr, cast = scalar[key]
            target = getattr(cfg, section) if section else cfg
            setattr(target, attr, cast(value))
        elif key in diagonal:
            section, attr, n = diagonal[key]
            vals = [float(v) for v in value.split()]
            setattr(getattr(cfg, section), attr, _diag(vals, n, key))
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def load_config(path: str) -> SessionConfig:
    """Flat `key = value` session file; `preset` selects the base bundle."""
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected `key = value`")
            key, value = (part.strip() for part in line.split("=", 1))
            entries.append((lineno, key, value))
    base = "indoor"
    for _, key, value in entries:
        if key == "preset":
            base = value
    cfg = preset(base)
    for lineno, key, value in entries:
        if key == "preset":
            continue
        try:
            apply_config_entry(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return cfg


@dataclass(slots=True)
class ScanResult:
    pose: Pose2  # global frame
    status: str  # "ok" | "degraded"
    index: int


@dataclass(slots=True)
class _Entry:
    state: WindowState
    points: np.ndarray
    scan_grid: NdtGrid | None
    traj_index: int
    segment_from_prev: ImuSegment | None = None
    inserted: bool = False


class SlamSession:
    def __init__(self, config: SessionConfig):
        self.config = config
        self.graph = PoseGraph(config.graph)
        self.submaps: dict[int, NdtSubmap] = {}
        self.active_submap_id = -1
        self.diagnostics: list[str] = []
        self.loop_log: list[str] = []
        self.n_loops_accepted = 0
        self._window: list[_Entry] = []
        self._records: list[list] = []  # [timestamp, global Pose2, status]
        self._last_time: float | None = None
        self._next_node_id = 0
        self._kf_raw: dict[int, tuple[int, Pose2]] = {}  # node -> (traj idx, raw global)
        self._last_kf_local: Pose2 | None = None  # in active submap frame
        self._last_kf_node: int | None = None
        self._last_departed_local: Pose2 | None = None
        self._traveled = 0.0
        self._finalized = False

    # -- public API ---------------------------------------------------------

    def process_scan(self, scan: RadarScan, imu_samples: np.ndarray | None = None) -> ScanResult:
        if self._finalized:
            raise RuntimeError("session already finalized")
        t = scan.timestamp
        if self._last_time is not None and t <= self._last_time:
            raise ValueError(f"non-monotone scan timestamp {t!r} after {self._last_time!r}")
        points = filter_scan(scan, self.config.filter)
        if self.active_submap_id < 0:
            result = self._bootstrap(t, points)
        else:
            result = self._step(t, points, imu_samples)
        self._last_time = t
        return result

    def finalize(self) -> Trajectory:
        """Flush the window, run a final optimization, return the corrected
        per-scan trajectory."""
        if not self._finalized:
            while self._window:
                self._depart(self._window.pop(0))
            if len(self.graph.nodes) > 1:
                self.graph.optimize()
                propagate_correction(self.graph, self.submaps.values())
            self._finalized = True
        return self._corrected_trajectory()

    @property
    def trajectory_statuses(self) -> list[str]:
        return [rec[2] for rec in self._records]

    def raw_trajectory(self) -> Trajectory:
        return Trajectory(np.array([r[0] for r in self._records]), [r[1].copy() for r in self._records])

    # -- internals ------------------------------------------------------------

    def _active(self) -> NdtSubmap:
        return self.submaps[self.active_submap_id]

    def _bootstrap(self, t: float, points: np.ndarray) -> ScanResult:
        identity = Pose2.identity()
        if points.shape[0] == 0:
            # nothing to anchor a map on yet; log the scan and keep waiting
            self._records.append([t, identity, "degraded"])
            self.diagnostics.append(f"t={t:.6f} status=degraded reason=empty-scan")
            return ScanResult(identity, "degraded", len(self._records) - 1)
        grid = NdtGrid(self.config.resolution, self.config.min_points)
        submap = NdtSubmap(grid=grid, root_pose=identity.copy(), keyframe_ids=[])
        self.submaps[0] = submap
        self.active_submap_id = 0
        insert_scan(submap, points, identity)
        state = WindowState(identity.copy(), Twist2(0.0, 0.0, 0.0), 0.0, t)
        entry = _Entry(
            state=state,
            points=points,
            scan_grid=self._scan_grid(points),
            traj_index=len(self._records),
            inserted=True,
        )
        self._records.append([t, identity.copy(), "ok"])
        self._window.append(entry)
        self._add_keyframe(entry, identity.copy(), is_root=True)
        self._last_departed_local = identity.copy()
        self.diagnostics.append(f"t={t:.6f} pose=0 0 0 cost=0 iters=- corr=0")
        return ScanResult(identity.copy(), "ok", entry.traj_index)

    def _scan_grid(self, points: np.ndarray) -> NdtGrid | None:
        if points.shape[0] == 0:
            return None
        grid = build_ndt(points, self.config.scan_resolution, self.config.min_points)
        return grid if grid.n_usable() > 0 else None

    def _step(self, t: float, points: np.ndarray, imu_samples) -> ScanResult:
        prev = self._window[-1].state
        dt = t - prev.timestamp
        segment = None
        if imu_samples is not None and len(imu_samples):
            try:
                segment = integrate_gyro(imu_samples, prev.timestamp, t)
            except ImuCoverageError:
                self.diagnostics.append(f"t={t:.6f} note=imu-gap")
        predicted = compose(prev.pose, exp_map(prev.velocity.as_array() * dt))
        state = WindowState(
            predicted,
            Twist2(prev.velocity.vx, prev.velocity.vy, prev.velocity.omega),
            prev.bias,
            t,
        )
        if len(self._window) == self.config.estimator.window_length:
            self._depart(self._window.pop(0))
        entry = _Entry(
            state=state,
            points=points,
            scan_grid=self._scan_grid(points),
            traj_index=len(self._records),
            segment_from_prev=segment,
        )
        self._window.append(entry)

        status = "ok" if entry.scan_grid is not None else "degraded"
        report = None
        if self._active().grid.n_usable() > 0 and any(e.scan_grid is not None for e in self._window):
            try:
                problem = build_problem(
                    [e.state for e in self._window],
                    [e.scan_grid for e in self._window],
                    self._active(),
                    [e.segment_from_prev for e in self._window[1:]],
                    self.config.estimator,
                )
                states, report = solve(problem)
                if report.degraded:
                    status = "degraded"
                else:
                    for e, s in zip(self._window, states):
                        e.state = s
            except NoCorrespondencesError:
                status = "degraded"
        else:
            status = "degraded"

        pose_global = compose(self._active().root_pose, self._window[-1].state.pose)
        self._records.append([t, pose_global, status])
        x, y, th = pose_global.xytheta()
        iters = "/".join(str(i) for i in report.iterations) if report else "-"
        cost = f"{report.final_cost:.6e}" if report else "-"
        corr = report.n_correspondences if report else 0
        self.diagnostics.append(
            f"t={t:.6f} pose={x:.6f} {y:.6f} {th:.6f} cost={cost} iters={iters} corr={corr}"
        )
        return ScanResult(pose_global, status, entry.traj_index)

    def _depart(self, entry: _Entry) -> None:
        """A state left the window: map insertion, keyframe and loop logic."""
        local = entry.state.pose
        submap = self._active()
        global_pose = compose(submap.root_pose, local)
        self._records[entry.traj_index][1] = global_pose

        if self._last_departed_local is not None:
            step = between(self._last_departed_local, local)
            self._traveled += float(np.linalg.norm(step.trans))

        is_kf = False
        rel_kf = None
        if self._last_kf_local is not None:
            rel_kf = between(self._last_kf_local, local)
            is_kf = (
                float(np.linalg.norm(rel_kf.trans)) > self.config.keyframe_translation
                or abs(rel_kf.angle) > math.radians(self.config.keyframe_rotation_deg)
            )
        rollover = is_kf and len(submap.keyframe_ids) >= self.config.max_keyframes_per_submap

        if rollover:
            new_grid = NdtGrid(self.config.resolution, self.config.min_points)
            new_submap = NdtSubmap(grid=new_grid, root_pose=global_pose.copy(), keyframe_ids=[])
            new_id = max(self.submaps) + 1
            self.submaps[new_id] = new_submap
            self.active_submap_id = new_id
            if not entry.inserted and entry.points.shape[0]:
                insert_scan(new_submap, entry.points, Pose2.identity())
                entry.inserted = True
            # re-express window states and local anchors in the new frame
            for e in self._window:
                e.state.pose = between(local, e.state.pose)
            if self._last_departed_local is not None:
                self._last_departed_local = between(local, self._last_departed_local)
            self._last_kf_local = None  # set to identity by _add_keyframe
            local = Pose2.identity()
        elif not entry.inserted and entry.points.shape[0]:
            insert_scan(submap, entry.points, entry.state.pose)
            entry.inserted = True

        self._last_departed_local = local.copy()
        if is_kf:
            self._add_keyframe(entry, global_pose, is_root=rollover, local=local, rel_to_prev=rel_kf)

    def _add_keyframe(
        self,
        entry: _Entry,
        global_pose: Pose2,
        is_root: bool,
        local: Pose2 | None = None,
        rel_to_prev: Pose2 | None = None,
    ) -> None:
        node_id = self._next_node_id
        self._next_node_id += 1
        descriptor = make_descriptor(
            entry.points, self.config.loop.n_ring, self.config.loop.n_sector, self.config.loop.max_range
        )
        node = KeyframeNode(
            id=node_id,
            pose=global_pose.copy(),
            submap_id=self.active_submap_id,
            is_submap_root=is_root,
            traveled_distance=self._traveled,
            descriptor=descriptor,
            scan_points=entry.points,
        )
        self.graph.add_node(node)
        self._active().keyframe_ids.append(node_id)
        if self._last_kf_node is not None and rel_to_prev is not None:
            self.graph.add_odometry_constraint(self._last_kf_node, node_id, rel_to_prev)
        self._last_kf_node = node_id
        self._last_kf_local = Pose2.identity() if is_root else (local.copy() if local is not None else Pose2.identity())
        self._kf_raw[node_id] = (entry.traj_index, global_pose.copy())
        if self.config.use_loop_closure and entry.scan_grid is not None:
            self._loop_search(node, entry)

    def _loop_search(self, node: KeyframeNode, entry: _Entry) -> None:
        database = [self.graph.nodes[i] for i in sorted(self.graph.nodes) if i < node.id]
        if not database:
            return
        cand = find_candidate(node, database, self.config.loop)
        t = entry.state.timestamp
        if cand is None:
            self.loop_log.append(f"t={t:.6f} candidate=- result=no-eligible-candidate")
            return
        cand_submap = self.submaps[cand.candidate_submap]
        if cand_submap.grid.n_usable() == 0:
            self.loop_log.append(f"t={t:.6f} candidate={cand.candidate_node} result=empty-submap")
            return
        seed = between(cand_submap.root_pose, node.pose)
        decision = refine_and_gate(
            cand, entry.scan_grid, cand_submap, self.config.estimator, self.config.loop, seed
        )
        d_cs = f"{cand.divergence:.4f}" if cand.divergence is not None else "-"
        verdict = "accepted" if decision.accepted else f"rejected({decision.reason})"
        self.loop_log.append(
            f"t={t:.6f} candidate={cand.candidate_node} d_sc={cand.d_sc:.4f} "
            f"d_od={cand.d_od:.4f} d_cs={d_cs} result={verdict}"
        )
        if not decision.accepted:
            return
        root_node = cand_submap.keyframe_ids[0]
        if root_node == node.id:
            return
        self.graph.add_loop_constraint(root_node, node.id, cand.refined_transform)
        self.n_loops_accepted += 1
        self.graph.optimize()
        propagate_correction(self.graph, self.submaps.values())

    def _corrected_trajectory(self) -> Trajectory:
        ts = np.array([r[0] for r in self._records])
        poses = [r[1].copy() for r in self._records]
        if self._kf_raw:
            kf_ids = sorted(self._kf_raw)
            kf_ts = []
            kf_corr = []
            for nid in kf_ids:
                traj_idx, raw = self._kf_raw[nid]
                corr = compose(self.graph.nodes[nid].pose, inverse(raw))
                kf_ts.append(self._records[traj_idx][0])
                kf_corr.append(log_map(corr).as_array())
            kf_ts = np.array(kf_ts)
            kf_corr = np.array(kf_corr)
            for i, t in enumerate(ts):
                if t <= kf_ts[0]:
                    c = kf_corr[0]
                elif t >= kf_ts[-1]:
                    c = kf_corr[-1]
                else:
                    hi = int(np.searchsorted(kf_ts, t, side="right"))
                    lo = hi - 1
                    s = (t - kf_ts[lo]) / (kf_ts[hi] - kf_ts[lo])
                    c = (1.0 - s) * kf_corr[lo] + s * kf_corr[hi]
                poses[i] = compose(exp_map(c), poses[i])
        return Trajectory(ts, poses)
