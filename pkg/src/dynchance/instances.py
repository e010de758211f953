"""Small reservoir-release instance used by the demos, fixtures and verification suites.

Inflows follow ``xi_t = phi xi_{t-1} + mu + eps_t``.  The release ``y_t`` is
priced at ``price[t]`` (negative, so releasing earns revenue), must lie in
``[0, y_max]``, is penalized when the reservoir would drop below ``l_min``,
and must keep the level below ``l_max`` jointly over all stages with
probability ``p``.  With ``hard_floor`` set, the level after each release
must also stay above it for every inflow, a hard row that involves the
inflow of its own stage.
"""

from __future__ import annotations

import numpy as np

from .reformulation import ConstraintGroup, StageSystem
from .timeseries import TimeSeriesModel

__all__ = ["reservoir_model", "reservoir_stages"]


def reservoir_model(T=3, phi=0.5, sigma=1.0, mu=1.0, xi0=2.0) -> TimeSeriesModel:
    return TimeSeriesModel.ar1(T, phi, sigma=sigma, mu=mu, xi0=xi0)


def _cumulative(T, a, b, rhs):
    """Rows ``a * sum_{tau<=t} y_tau + b * sum_{tau<=t} xi_tau <= rhs``, one per stage."""
    return ConstraintGroup(A=[[np.array([[a]])] * (t + 1) for t in range(T)],
                           B=[[np.array([[b]])] * (t + 1) for t in range(T)], b=[[rhs]] * T)


def reservoir_stages(T=3, p=0.8, level0=2.0, l_min=1.0, l_max=5.0, y_max=3.0, price=None,
                     penalty=5.0, hard_floor=None) -> StageSystem:
    """Stage data of the reservoir instance with scalar releases and inflows."""
    price = [-1.0 - 0.2 * t for t in range(T)] if price is None else list(price)
    hard = ConstraintGroup(
        A=[[np.zeros((2, 1))] * t + [np.array([[1.0], [-1.0]])] for t in range(T)],
        B=[[np.zeros((2, 1))] * (t + 1) for t in range(T)],
        b=[[y_max, 0.0]] * T,
    )
    if hard_floor is not None:
        floor = _cumulative(T, 1.0, -1.0, level0 - hard_floor)
        hard = ConstraintGroup(
            A=[[np.vstack([a, c]) for a, c in zip(hard.A[t], floor.A[t])] for t in range(T)],
            B=[[np.vstack([a, c]) for a, c in zip(hard.B[t], floor.B[t])] for t in range(T)],
            b=[[y_max, 0.0, level0 - hard_floor] for _ in range(T)],
        )
    return StageSystem(
        n=[1] * T, M=1,
        soft=_cumulative(T, 1.0, -1.0, level0 - l_min),
        prob=_cumulative(T, -1.0, 1.0, l_max - level0),
        hard=hard,
        h=[[c] for c in price], penalty=[[penalty]] * T, p=p,
    )
