"""SE(2) rigid transforms and tangent-space operations.

Tangent vectors are ordered ``[x, y, theta]``. Exp/Log are the group maps,
so translation couples with rotation through the V(theta) integral matrix;
they are not the component-wise versions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Below this |theta| the closed-form V(theta) coefficients lose digits; the
# second-order series keeps Exp/Log C1-continuous across the switch.
SMALL_ANGLE = 1e-7

_K = np.array([[0.0, -1.0], [1.0, 0.0]])  # generator of SO(2)


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]; the boundary maps to +pi."""
    w = math.remainder(theta, math.tau)
    if w <= -math.pi:
        w = math.pi
    return w


def rot2(theta: float) -> np.ndarray:
    """2x2 rotation matrix for a planar angle."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(slots=True)
class Twist2:
    """Tangent-space element: planar velocity or pose increment."""

    vx: float
    vy: float
    omega: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega], dtype=float)

    @staticmethod
    def from_array(a) -> "Twist2":
        return Twist2(float(a[0]), float(a[1]), float(a[2]))


@dataclass(slots=True)
class Pose2:
    """Planar rigid transform: 2x2 rotation matrix plus translation vector."""

    rot: np.ndarray
    trans: np.ndarray

    @staticmethod
    def identity() -> "Pose2":
        return Pose2(np.eye(2), np.zeros(2))

    @staticmethod
    def from_xytheta(x: float, y: float, theta: float) -> "Pose2":
        return Pose2(rot2(theta), np.array([float(x), float(y)]))

    @property
    def angle(self) -> float:
        a = math.atan2(self.rot[1, 0], self.rot[0, 0])
        if a <= -math.pi:
            a = math.pi
        return a

    def xytheta(self) -> np.ndarray:
        return np.array([self.trans[0], self.trans[1], self.angle])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rot
        m[:2, 2] = self.trans
        return m

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Apply the transform to an (n, 2) array of points."""
        return pts @ self.rot.T + self.trans

    def copy(self) -> "Pose2":
        return Pose2(self.rot.copy(), self.trans.copy())


def compose(a: Pose2, b: Pose2) -> Pose2:
    return Pose2(a.rot @ b.rot, a.rot @ b.trans + a.trans)


def inverse(a: Pose2) -> Pose2:
    rt = a.rot.T
    return Pose2(rt.copy(), -(rt @ a.trans))


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative transform taking a's frame to b's frame: a^-1 * b."""
    rt = a.rot.T
    return Pose2(rt @ b.rot, rt @ (b.trans - a.trans))


def _v_coeffs(theta: float) -> tuple[float, float]:
    # V(theta) = [[a, -b], [b, a]]
    if abs(theta) < SMALL_ANGLE:
        return 1.0 - theta * theta / 6.0, 0.5 * theta
    return math.sin(theta) / theta, (1.0 - math.cos(theta)) / theta


def exp_map(xi: "Twist2 | np.ndarray") -> Pose2:
    """Lift a tangent vector to the group element."""
    if isinstance(xi, Twist2):
        vx, vy, theta = xi.vx, xi.vy, xi.omega
    else:
        vx, vy, theta = float(xi[0]), float(xi[1]), float(xi[2])
    a, b = _v_coeffs(theta)
    return Pose2(rot2(theta), np.array([a * vx - b * vy, b * vx + a * vy]))


def log_map(p: Pose2) -> Twist2:
    """Tangent vector of a group element; omega lands in (-pi, pi]."""
    theta = p.angle
    a, b = _v_coeffs(theta)
    d = a * a + b * b
    x, y = float(p.trans[0]), float(p.trans[1])
    return Twist2((a * x + b * y) / d, (-b * x + a * y) / d, theta)


def adjoint(p: Pose2) -> np.ndarray:
    """3x3 Adj(T) with Log(T Exp(tau) T^-1) = Adj(T) tau."""
    out = np.zeros((3, 3))
    out[:2, :2] = p.rot
    out[0, 2] = p.trans[1]
    out[1, 2] = -p.trans[0]
    out[2, 2] = 1.0
    return out


def _jr_parts(tau: np.ndarray) -> tuple[float, float, float, float]:
    px, py, th = float(tau[0]), float(tau[1]), float(tau[2])
    if abs(th) < SMALL_ANGLE:
        a = 1.0 - th * th / 6.0
        b = 0.5 * th
        c1 = -0.5 * py + px * th / 6.0 + py * th * th / 24.0
        c2 = 0.5 * px + py * th / 6.0 - px * th * th / 24.0
    else:
        s, c = math.sin(th), math.cos(th)
        a = s / th
        b = (1.0 - c) / th
        c1 = (th * px - py + py * c - px * s) / (th * th)
        c2 = (px + th * py - px * c - py * s) / (th * th)
    return a, b, c1, c2


def jac_right(tau: np.ndarray) -> np.ndarray:
    """Right Jacobian: Log(Exp(tau)^-1 Exp(tau + d)) ~= J_r(tau) d."""
    a, b, c1, c2 = _jr_parts(tau)
    return np.array([[a, b, c1], [-b, a, c2], [0.0, 0.0, 1.0]])


def jac_right_inv(tau: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: Log(Exp(tau) Exp(d)) ~= tau + J_r^-1(tau) d."""
    a, b, c1, c2 = _jr_parts(tau)
    d = a * a + b * b
    ia, ib = a / d, b / d
    # block inverse of [[A, c], [0, 1]] with A = [[a, b], [-b, a]]
    return np.array(
        [
            [ia, -ib, -(ia * c1 - ib * c2)],
            [ib, ia, -(ib * c1 + ia * c2)],
            [0.0, 0.0, 1.0],
        ]
    )


def jac_left_inv(tau: np.ndarray) -> np.ndarray:
    """Inverse left Jacobian: Log(Exp(d) Exp(tau)) ~= tau + J_l^-1(tau) d."""
    return jac_right_inv(-np.asarray(tau, dtype=float))


def interpolate(a: Pose2, b: Pose2, s: float) -> Pose2:
    """Geodesic interpolation from a (s=0) to b (s=1) on the group."""
    return compose(a, exp_map(s * log_map(between(a, b)).as_array()))
