"""Scenario-wise projection of a decision rule onto the hard-constraint polyhedra.

Stage ``t`` of a scenario is projected onto
``X_t = {u : A[t][t] u <= b[t] - sum_{tau<t} (B[t][tau] xi_tau + A[t][tau] z_tau)}``
with the already projected ``z_tau`` of earlier stages plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .reformulation import LinearDecisionRule, StageSystem

__all__ = [
    "InfeasibleQP",
    "InfeasibleStage",
    "QPResult",
    "qp_solve_active_set",
    "project_box",
    "project_scenario",
    "project_scenarios",
]


class InfeasibleQP(ValueError):
    """Empty polyhedron; ``ray`` is a Farkas certificate ``lam >= 0, A^T lam = 0, b^T lam < 0``."""

    def __init__(self, message, ray=None):
        super().__init__(message)
        self.ray = ray


class InfeasibleStage(ValueError):
    def __init__(self, stage, scenario=None, ray=None):
        where = f" in scenario {scenario}" if scenario is not None else ""
        super().__init__(f"hard-constraint set of stage {stage} is empty{where}")
        self.stage = stage
        self.scenario = scenario
        self.ray = ray


@dataclass
class QPResult:
    u: np.ndarray
    multipliers: np.ndarray
    active: list
    iterations: int
    stationarity: float
    feasibility: float
    complementarity: float


def _kkt(y, A, b, u, lam):
    stat = float(np.abs(u - y + A.T @ lam).max(initial=0.0))
    feas = float(np.maximum(A @ u - b, 0.0).max(initial=0.0))
    comp = float(np.abs(lam * (A @ u - b)).max(initial=0.0))
    return stat, feas, comp


def qp_solve_active_set(y, A, b, tol=1e-12, max_iter=None, check=True):
    """Minimize ``||u - y||^2 / 2`` subject to ``A u <= b`` by a dual active-set method.

    The iteration starts from the unconstrained minimizer ``y`` and adds the
    most recently violated constraint with the smallest index (Bland-style
    rule), dropping constraints whose multipliers would turn negative.  With
    the identity Hessian every step is a small least-squares solve.

    Raises
    ------
    InfeasibleQP
        With a Farkas ray when the constraints are inconsistent.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    A = np.atleast_2d(np.asarray(A, dtype=float)).reshape(-1, y.size)
    b = np.asarray(b, dtype=float).reshape(-1)
    m = b.size
    u = y.copy()
    lam = np.zeros(m)
    active = []
    if max_iter is None:
        max_iter = 50 * (m + y.size) + 50
    scale = 1.0 + np.abs(b).max(initial=0.0) + np.abs(A).max(initial=0.0) * np.abs(y).max(initial=0.0)
    it = 0
    while True:
        it += 1
        if it > max_iter:
            raise RuntimeError("active-set iteration limit reached")
        viol = A @ u - b
        cand = np.flatnonzero(viol > tol * scale)
        if cand.size == 0:
            break
        k = int(cand[0])
        # partially satisfy constraint k, dropping blocking constraints as needed
        while True:
            a_k = A[k]
            if active:
                N = A[active].T  # (n, q)
                Q, Rq = np.linalg.qr(N)
                r = np.linalg.solve(Rq, Q.T @ a_k)  # N^+ a_k
                z = a_k - N @ r
            else:
                r = np.zeros(0)
                z = a_k.copy()
            s = A[k] @ u - b[k]
            zz = z @ z
            t_full = s / zz if zz > 1e-14 * max(a_k @ a_k, 1.0) else np.inf
            # largest dual step keeping active multipliers nonnegative
            t_dual, drop = np.inf, None
            for j, (idx, rj) in enumerate(zip(active, r)):
                if rj > 1e-14:
                    tj = lam[idx] / rj
                    if tj < t_dual - 1e-15 or (abs(tj - t_dual) <= 1e-15 and idx < active[drop]):
                        t_dual, drop = tj, j
            if not np.isfinite(t_full) and not np.isfinite(t_dual):
                ray = np.zeros(m)
                ray[k] = 1.0
                for idx, rj in zip(active, r):
                    ray[idx] = -rj
                raise InfeasibleQP("hard-constraint polyhedron is empty", ray=ray)
            step = min(t_full, t_dual)
            if np.isfinite(t_full):
                u = u - step * z
            for idx, rj in zip(active, r):
                lam[idx] -= step * rj
            lam[k] += step
            if t_full <= t_dual:
                active.append(k)
                break
            idx = active.pop(drop)
            lam[idx] = 0.0
    lam = np.maximum(lam, 0.0)
    stat, feas, comp = _kkt(y, A, b, u, lam)
    if check and (stat > 1e-8 * scale or feas > 1e-9 * scale or comp > 1e-8 * scale):
        raise RuntimeError(f"projection KKT check failed: stationarity {stat:.2e}, "
                           f"feasibility {feas:.2e}, complementarity {comp:.2e}")
    return QPResult(u=u, multipliers=lam, active=sorted(active), iterations=it,
                    stationarity=stat, feasibility=feas, complementarity=comp)


def project_box(rule: LinearDecisionRule, xi, bounds):
    """Clip the rule's decisions along scenarios ``xi`` (``(..., T, M)``) to per-stage bounds.

    ``bounds`` is ``(lo, hi)`` with one vector per stage.
    """
    lo, hi = bounds
    y = rule.evaluate(xi)
    out = []
    for t, yt in enumerate(y):
        l, h = np.asarray(lo[t], dtype=float), np.asarray(hi[t], dtype=float)
        if np.any(l > h):
            raise ValueError(f"stage {t + 1}: lower bound exceeds upper bound")
        out.append(np.maximum(l, np.minimum(yt, h)))
    return out


def project_scenario(rule: LinearDecisionRule, xi, stage: StageSystem, scenario=None):
    """Project the rule along one scenario ``xi`` of shape ``(T, M)`` stage by stage.

    Returns a list of per-stage decisions ``z_t``.
    """
    xi = np.asarray(xi, dtype=float)
    y = rule.evaluate(xi)
    hard = stage.hard
    z = []
    for t in range(stage.T):
        rhs = hard.b[t].copy()
        for tau in range(t):
            rhs -= hard.B[t][tau] @ xi[tau] + hard.A[t][tau] @ z[tau]
        if np.any(hard.B[t][t]):
            raise ValueError("projection needs wait-and-see hard rows")
        A = hard.A[t][t]
        if rhs.size == 0:
            z.append(y[t].copy())
            continue
        try:
            z.append(qp_solve_active_set(y[t], A, rhs).u)
        except InfeasibleQP as exc:
            raise InfeasibleStage(t + 1, scenario, exc.ray) from None
    return z


def project_scenarios(rule: LinearDecisionRule, xi, stage: StageSystem, bounds=None):
    """Project along many scenarios ``(N, T, M)``; uses the clip when ``bounds`` is given.

    Returns a list over stages of ``(N, n_t)`` arrays.
    """
    xi = np.asarray(xi, dtype=float)
    if bounds is not None:
        return project_box(rule, xi, bounds)
    rows = [project_scenario(rule, s, stage, scenario=i) for i, s in enumerate(xi)]
    return [np.array([r[t] for r in rows]) for t in range(stage.T)]
