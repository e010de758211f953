"""Closed-form reference problem and sampling estimators used for verification.

The reference problem has two stages, ``xi`` uniform on the L-shaped set
``([-1, 1] x [0, 1]) U ([0, 1] x [-1, 0])`` (area 3) and probability level
``1/3``.  Policies are ``(y1, a * xi1)`` with ``a >= -1``; the first-stage
decision ``y1`` is minimized.
"""

from __future__ import annotations

import numpy as np

from .solver import grid_search

__all__ = [
    "EXAMPLE_LEVEL",
    "in_S",
    "in_S_tilde",
    "psi",
    "psi_tilde",
    "sample_example1",
    "saa_probability",
    "example1_values",
]

EXAMPLE_LEVEL = 1.0 / 3.0


def _domain(y1, a):
    y1, a = np.broadcast_arrays(np.asarray(y1, dtype=float), np.asarray(a, dtype=float))
    if np.any((y1 < 0) | (y1 > 1)) or np.any(a < -1):
        raise ValueError("defined for y1 in [0, 1] and a >= -1")
    return y1, a


def _on_support(xi):
    x1, x2 = xi[..., 0], xi[..., 1]
    upper = (x1 >= -1) & (x1 <= 1) & (x2 >= 0) & (x2 <= 1)
    lower = (x1 >= 0) & (x1 <= 1) & (x2 >= -1) & (x2 <= 0)
    return upper | lower


def in_S(xi, a, y1):
    """Event that the unprojected rule ``(y1, a xi1)`` satisfies ``xi1 <= y1``, ``xi2 <= y2 in [0, 1]``."""
    xi = np.asarray(xi, dtype=float)
    y2 = a * xi[..., 0]
    return _on_support(xi) & (xi[..., 0] <= y1) & (xi[..., 1] <= y2) & (y2 >= 0) & (y2 <= 1)


def in_S_tilde(xi, a, y1):
    """Same event for the rule whose second stage is clipped to ``[0, 1]``."""
    xi = np.asarray(xi, dtype=float)
    y2 = np.clip(a * xi[..., 0], 0.0, 1.0)
    return _on_support(xi) & (xi[..., 0] <= y1) & (xi[..., 1] <= y2)


def psi(y1, a):
    """Probability of :func:`in_S`; vectorized over ``y1`` and ``a``.

    At ``a = 0`` the event reduces to ``xi1 <= y1, xi2 <= 0`` with mass
    ``y1 / 3``; for ``a < 0`` only the upper-left triangle under ``a xi1`` counts.
    """
    y1, a = _domain(y1, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = (y1 + a * y1 ** 2 / 2) / 3
        capped = np.where(y1 > 1 / a, 1 / (2 * a), inner)
    out = np.where(a < 0, -a / 6, np.where(a <= 1, inner, capped))
    return out[()] if out.ndim == 0 else out


def psi_tilde(y1, a):
    """Probability of :func:`in_S_tilde`; vectorized over ``y1`` and ``a``."""
    y1, a = _domain(y1, a)
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = (y1 + a * y1 ** 2 / 2) / 3
        capped = np.where(y1 > 1 / a, (2 * y1 - 1 / (2 * a)) / 3, inner)
    out = np.where(a <= 0, (y1 - a / 2) / 3, np.where(a <= 1, inner, capped))
    return out[()] if out.ndim == 0 else out


def sample_example1(n, rng):
    """Exact uniform draws on the L-shaped support as a 2:1 mixture of rectangles."""
    rng = np.random.default_rng(rng)
    upper = rng.random(n) < 2.0 / 3.0
    u = rng.random((n, 2))
    x1 = np.where(upper, 2 * u[:, 0] - 1, u[:, 0])
    x2 = np.where(upper, u[:, 1], -u[:, 1])
    return np.column_stack([x1, x2])


def saa_probability(event, sampler, n, seed=0, batch=1_000_000):
    """Sample-average estimate of ``P(event)`` with its binomial standard deviation.

    Parameters
    ----------
    event : callable
        Maps an array of draws to booleans.
    sampler : callable
        ``sampler(m, rng)`` returns ``m`` draws.
    n : int
        Total sample size, drawn in batches from one ``default_rng(seed)``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    hits, left = 0, int(n)
    while left:
        m = min(left, batch)
        hits += int(np.count_nonzero(event(sampler(m, rng))))
        left -= m
    est = hits / n
    return est, float(np.sqrt(est * (1 - est) / n))


def example1_values(p=EXAMPLE_LEVEL, resolution=400):
    """Optimal values ``(phi, phi1, phi2, phi3, phi4)`` of the reference problem.

    ``phi`` is zero because the policy ``y2 = 1{xi1 >= 0}`` only needs
    ``y1 >= 0``.  Under almost-sure feasibility ``a xi1 in [0, 1]`` forces
    ``a = 0``, and then ``y1 / 3 >= p`` gives ``phi1 = 3p`` capped at one.
    ``phi2`` equals ``phi3``: the optimal rule of the intersected problem
    already lies in the smaller feasible set.  ``phi3`` and ``phi4`` are grid
    searches over ``y1 in [0, 1]``, ``a in [-1, 3]``.
    """
    phi = 0.0
    phi1 = min(3.0 * p, 1.0) if p <= 1.0 / 3.0 else float("inf")
    box = [(0.0, 1.0), (-1.0, 3.0)]
    _, phi3 = grid_search(lambda y, a: y, box, resolution,
                          feasible=lambda y, a: psi(y, a) >= p - 1e-15)
    _, phi4 = grid_search(lambda y, a: y, box, resolution,
                          feasible=lambda y, a: psi_tilde(y, a) >= p - 1e-15)
    return phi, phi1, phi3, phi3, phi4
