"""Robust loss functions for registration residuals.

All functions take the *squared* residual and accept scalars or numpy
arrays. The adaptive family follows the shape/scale parameterization with
an extra scale-control factor ``mu`` used for coarse-to-fine annealing:

    rho(r2, alpha, c, mu) = |alpha-2|/alpha * ((q/|alpha-2| + 1)^(alpha/2) - 1)

with q = r2 / (mu c^2). alpha -> 2 gives the quadratic loss q/2, alpha -> 0
the log loss, and alpha -> -inf the Welsch loss.
"""

from __future__ import annotations

import numpy as np

# alpha closer than this to the removable singularities uses the limit form
_ALPHA_EPS = 1e-8


def welsch_loss(r2, c: float):
    """Bounded loss 1 - exp(-r2 / (2 c^2))."""
    return -np.expm1(-np.asarray(r2, dtype=float) / (2.0 * c * c))


def adaptive_loss(r2, alpha: float, c: float, mu: float = 1.0):
    """General robust loss; monotone in r2, saturating for alpha < 0."""
    q = np.asarray(r2, dtype=float) / (mu * c * c)
    if abs(alpha - 2.0) < _ALPHA_EPS:
        return 0.5 * q
    if abs(alpha) < _ALPHA_EPS:
        return np.log1p(0.5 * q)
    am2 = abs(alpha - 2.0)
    # exp/log1p form stays accurate for very negative alpha
    return am2 / alpha * np.expm1(0.5 * alpha * np.log1p(q / am2))


def adaptive_loss_grad(r2, alpha: float, c: float, mu: float = 1.0):
    """Derivative of adaptive_loss with respect to r2."""
    s = 1.0 / (mu * c * c)
    q = np.asarray(r2, dtype=float) * s
    if abs(alpha - 2.0) < _ALPHA_EPS:
        return 0.5 * s * np.ones_like(q)
    if abs(alpha) < _ALPHA_EPS:
        return 0.5 * s / (0.5 * q + 1.0)
    am2 = abs(alpha - 2.0)
    return 0.5 * s * np.exp((0.5 * alpha - 1.0) * np.log1p(q / am2))


def anneal_schedule(mu0: float, k_mu: float) -> list[float]:
    """Geometric scale-control schedule ending exactly at 1."""
    if mu0 < 1.0:
        raise ValueError(f"mu0 must be >= 1, got {mu0}")
    if k_mu <= 1.0:
        raise ValueError(f"k_mu must be > 1, got {k_mu}")
    mus = []
    mu = float(mu0)
    while mu > 1.0:
        mus.append(mu)
        mu /= k_mu
    mus.append(1.0)
    return mus
