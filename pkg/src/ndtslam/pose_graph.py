"""Keyframe pose graph with odometry and loop constraints.

The first node anchors the gauge and never moves. Optimization is plain
dense Levenberg-Marquardt on the whitened constraint residuals; loop
outliers are expected to have been filtered by the divergence gate, so no
robust kernel is applied here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .se2 import (
    Pose2,
    adjoint,
    between,
    compose,
    exp_map,
    inverse,
    jac_right_inv,
    log_map,
)

_GRAD_TOL = 1e-8
_STEP_TOL = 1e-12
_LAMBDA_INIT = 1e-4
_LAMBDA_MAX = 1e10


class DisconnectedGraphError(RuntimeError):
    """Raised when nodes are unreachable from the anchor."""


def _default_omega_od() -> np.ndarray:
    return np.diag([100.0, 100.0, 400.0])


def _default_omega_lo() -> np.ndarray:
    return np.diag([25.0, 25.0, 100.0])


@dataclass
class PoseGraphConfig:
    omega_odometry: np.ndarray = field(default_factory=_default_omega_od)
    omega_loop: np.ndarray = field(default_factory=_default_omega_lo)
    max_iterations: int = 50


@dataclass(slots=True)
class KeyframeNode:
    id: int
    pose: Pose2
    submap_id: int
    is_submap_root: bool
    traveled_distance: float
    descriptor: np.ndarray | None = None
    scan_points: np.ndarray | None = None


@dataclass(slots=True)
class Constraint:
    from_id: int
    to_id: int
    relative: Pose2
    information: np.ndarray
    kind: str  # "odometry" | "loop"


def constraint_error(relative: Pose2, pose_a: Pose2, pose_b: Pose2) -> np.ndarray:
    """Tangent error between the measured and estimated relative transform."""
    return log_map(compose(inverse(relative), between(pose_a, pose_b))).as_array()


class PoseGraph:
    def __init__(self, config: PoseGraphConfig | None = None):
        self.config = config or PoseGraphConfig()
        self.nodes: dict[int, KeyframeNode] = {}
        self.constraints: list[Constraint] = []

    def add_node(self, node: KeyframeNode) -> None:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id}")
        self.nodes[node.id] = node

    def add_odometry_constraint(self, from_id: int, to_id: int, relative: Pose2, information: np.ndarray | None = None) -> None:
        self._add(from_id, to_id, relative, information, "odometry")

    def add_loop_constraint(self, from_id: int, to_id: int, relative: Pose2, information: np.ndarray | None = None) -> None:
        self._add(from_id, to_id, relative, information, "loop")

    def _add(self, from_id, to_id, relative, information, kind) -> None:
        if from_id == to_id:
            raise ValueError("constraint endpoints must differ")
        if from_id not in self.nodes or to_id not in self.nodes:
            raise KeyError(f"unknown node in constraint {from_id} -> {to_id}")
        if information is None:
            information = self.config.omega_odometry if kind == "odometry" else self.config.omega_loop
        self.constraints.append(Constraint(from_id, to_id, relative.copy(), np.asarray(information, dtype=float), kind))

    def error(self, constraint: Constraint) -> np.ndarray:
        return constraint_error(
            constraint.relative,
            self.nodes[constraint.from_id].pose,
            self.nodes[constraint.to_id].pose,
        )

    def total_cost(self) -> float:
        cost = 0.0
        for c in self.constraints:
            e = self.error(c)
            cost += float(e @ c.information @ e)
        return cost

    def _check_connected(self, anchor: int) -> None:
        seen = {anchor}
        frontier = [anchor]
        adj: dict[int, list[int]] = {i: [] for i in self.nodes}
        for c in self.constraints:
            adj[c.from_id].append(c.to_id)
            adj[c.to_id].append(c.from_id)
        while frontier:
            cur = frontier.pop()
            for nxt in adj[cur]:
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        orphans = sorted(set(self.nodes) - seen)
        if orphans:
            raise DisconnectedGraphError(f"nodes not connected to the anchor: {orphans}")

    def optimize(self, max_iterations: int | None = None) -> dict:
        """LM over all node poses except the anchored first node.

        Returns a report with per-iteration costs (monotone over accepted
        steps) and the iteration count.
        """
        if not self.nodes:
            return {"iterations": 0, "costs": []}
        ids = sorted(self.nodes)
        anchor = ids[0]
        self._check_connected(anchor)
        free = [i for i in ids if i != anchor]
        col = {nid: 3 * k for k, nid in enumerate(free)}
        n_params = 3 * len(free)
        if n_params == 0:
            return {"iterations": 0, "costs": [self.total_cost()]}
        max_iterations = max_iterations or self.config.max_iterations
        whiteners = {}

        def white(info_key, info):
            key = info_key
            if key not in whiteners:
                lam, u = np.linalg.eigh(info)
                whiteners[key] = (u * np.sqrt(np.clip(lam, 0.0, None))) @ u.T
            return whiteners[key]

        def residuals(with_jac: bool):
            m = 3 * len(self.constraints)
            r = np.empty(m)
            jac = np.zeros((m, n_params)) if with_jac else None
            for k, c in enumerate(self.constraints):
                pa = self.nodes[c.from_id].pose
                pb = self.nodes[c.to_id].pose
                e = constraint_error(c.relative, pa, pb)
                w = white(id(c.information), c.information)
                r[3 * k : 3 * k + 3] = w @ e
                if with_jac:
                    jri = jac_right_inv(e)
                    if c.to_id != anchor:
                        jac[3 * k : 3 * k + 3, col[c.to_id] : col[c.to_id] + 3] = w @ jri
                    if c.from_id != anchor:
                        g_rel = between(pa, pb)
                        jac[3 * k : 3 * k + 3, col[c.from_id] : col[c.from_id] + 3] = (
                            -w @ jri @ adjoint(inverse(g_rel))
                        )
            return r, jac

        def apply(delta):
            for nid in free:
                d = delta[col[nid] : col[nid] + 3]
                self.nodes[nid].pose = compose(self.nodes[nid].pose, exp_map(d))

        def poses_snapshot():
            return {nid: self.nodes[nid].pose.copy() for nid in free}

        def restore(snap):
            for nid, p in snap.items():
                self.nodes[nid].pose = p.copy()

        lam = _LAMBDA_INIT
        r, _ = residuals(False)
        cost = float(r @ r)
        costs = [cost]
        it = 0
        while it < max_iterations:
            it += 1
            r, jac = residuals(True)
            grad = jac.T @ r
            if np.linalg.norm(grad) < _GRAD_TOL:
                break
            h = jac.T @ jac
            diag = np.maximum(np.diag(h), 1e-12)
            accepted = False
            while lam <= _LAMBDA_MAX:
                delta = np.linalg.solve(h + lam * np.diag(diag), -grad)
                if np.linalg.norm(delta) < _STEP_TOL:
                    break
                snap = poses_snapshot()
                apply(delta)
                rt, _ = residuals(False)
                trial = float(rt @ rt)
                if np.isfinite(trial) and trial < cost:
                    cost = trial
                    costs.append(cost)
                    lam = max(lam / 10.0, 1e-12)
                    accepted = True
                    break
                restore(snap)
                lam *= 10.0
            if not accepted:
                break
        return {"iterations": it, "costs": costs}

    def export_g2o(self) -> str:
        """Graph as VERTEX_SE2 / EDGE_SE2 text lines."""
        lines = []
        for nid in sorted(self.nodes):
            x, y, th = self.nodes[nid].pose.xytheta()
            lines.append(f"VERTEX_SE2 {nid} {x!r} {y!r} {th!r}")
        for c in self.constraints:
            x, y, th = c.relative.xytheta()
            i = c.information
            vals = [i[0, 0], i[0, 1], i[0, 2], i[1, 1], i[1, 2], i[2, 2]]
            tail = " ".join(repr(float(v)) for v in vals)
            lines.append(f"EDGE_SE2 {c.from_id} {c.to_id} {x!r} {y!r} {th!r} {tail}")
        return "\n".join(lines)


def propagate_correction(graph: PoseGraph, submaps) -> None:
    """Replace each submap's root pose by its optimized root-node pose.

    In-window states keep their submap-frame coordinates; only the anchor
    moves.
    """
    for sm in submaps:
        if sm.keyframe_ids:
            root_id = sm.keyframe_ids[0]
            sm.root_pose = graph.nodes[root_id].pose.copy()
