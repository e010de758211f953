"""Nonlinear programming driver for the chance-constrained instances.

Linear equalities are eliminated exactly through an orthonormal null-space
basis, a phase-1 linear program finds a point satisfying the linear
inequalities, and each start is handed to SLSQP (a sequential quadratic
programming method with quasi-Newton curvature).  A first-order optimality
residual is computed independently of the optimizer from nonnegative least
squares multipliers.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import linprog, minimize, nnls

from .projection import qp_solve_active_set
from .reformulation import LinearSystem

__all__ = [
    "Constraint",
    "NlpProblem",
    "SolverOptions",
    "SolveReport",
    "solve_nlp",
    "grid_search",
]


@dataclass
class Constraint:
    """Smooth inequality ``fun(x) <= 0`` with gradient ``jac(x)``."""

    fun: callable
    jac: callable
    name: str = "nonlinear"


@dataclass
class NlpProblem:
    x0: np.ndarray
    objective: callable
    gradient: callable
    constraints: list = field(default_factory=list)
    linear: LinearSystem = None
    name: str = "nlp"
    extra_starts: list = field(default_factory=list)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if self.linear is None:
            self.linear = LinearSystem.empty(self.x0.size)


@dataclass
class SolverOptions:
    max_iter: int = 500
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-6
    starts: int = 5
    seed: int = 0
    start_scale: float = 0.5
    active_tol: float = 1e-4


@dataclass
class SolveReport:
    """Outcome of a solve.

    ``success`` means the returned point has relative KKT residual and
    constraint violation below the requested tolerances.
    """

    x: np.ndarray
    objective: float
    success: bool
    message: str
    kkt_residual: float
    max_violation: float
    iterations: int
    wall_time: float
    seed: int
    start_index: int = 0
    probability: float = None
    kind: str = None
    residuals: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, include_timing=False):
        out = {
            "kind": self.kind,
            "success": bool(self.success),
            "message": self.message,
            "objective": _num(self.objective),
            "probability": _num(self.probability),
            "kkt_residual": _num(self.kkt_residual),
            "max_violation": _num(self.max_violation),
            "iterations": int(self.iterations),
            "seed": int(self.seed),
            "start_index": int(self.start_index),
            "x": [float(v) for v in np.asarray(self.x).reshape(-1)],
            "residuals": {k: _num(v) for k, v in self.residuals.items()},
            "diagnostics": _jsonable(self.diagnostics),
        }
        if include_timing:
            out["wall_time"] = float(self.wall_time)
        return out


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return _num(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


class _Reduced:
    """Affine parametrization ``x = xp + N z`` of the linear equality manifold."""

    def __init__(self, lin: LinearSystem, nx, tol=1e-9):
        if lin.b_eq.size:
            xp, *_ = np.linalg.lstsq(lin.A_eq, lin.b_eq, rcond=None)
            res = np.abs(lin.A_eq @ xp - lin.b_eq).max()
            if res > tol * (1.0 + np.abs(lin.b_eq).max()):
                raise _Phase1Error(f"linear equalities are inconsistent (residual {res:.2e})")
            N = null_space(lin.A_eq)
            # exact zeros where the basis is supported on a coordinate subspace
            N[np.abs(N) < 1e-14] = 0.0
            xp[np.abs(xp) < 1e-15] = 0.0
        else:
            xp, N = np.zeros(nx), np.eye(nx)
        self.xp, self.N = xp, N
        self.A = lin.A_ub @ N
        self.b = lin.b_ub - lin.A_ub @ xp

    @property
    def dim(self):
        return self.N.shape[1]

    def x(self, z):
        return self.xp + self.N @ z

    def z(self, x):
        return self.N.T @ (np.asarray(x, dtype=float) - self.xp)

    def project(self, z):
        """Nearest point of the linear inequality set (the basis is orthonormal)."""
        if self.b.size == 0 or np.all(self.A @ z <= self.b + 1e-12):
            return z
        return qp_solve_active_set(z, self.A, self.b, check=False).u


class _Phase1Error(ValueError):
    pass


def _phase1(red: _Reduced):
    if red.b.size == 0 or np.all(red.b >= 0):
        return np.zeros(red.dim)
    res = linprog(np.zeros(red.dim), A_ub=red.A, b_ub=red.b, bounds=[(None, None)] * red.dim, method="highs")
    if res.status != 0:
        raise _Phase1Error("linear constraints admit no feasible point")
    return res.x


def _violation(problem, red, z):
    x = red.x(z)
    lin = float(np.maximum(red.A @ z - red.b, 0.0).max(initial=0.0)) if red.b.size else 0.0
    eq = 0.0
    if problem.linear.b_eq.size:
        eq = float(np.abs(problem.linear.A_eq @ x - problem.linear.b_eq).max())
    nl = max((max(float(c.fun(x)), 0.0) for c in problem.constraints), default=0.0)
    return max(lin, eq, nl), {"linear_inequality": lin, "linear_equality": eq, "nonlinear": nl}


def _kkt_residual(problem, red, z, opts):
    """Relative stationarity plus complementarity in the reduced space."""
    x = red.x(z)
    gf = red.N.T @ problem.gradient(x)
    rows, slacks = [], []
    for c in problem.constraints:
        v = float(c.fun(x))
        if v >= -opts.active_tol:
            rows.append(red.N.T @ c.jac(x))
            slacks.append(v)
    if red.b.size:
        s = red.A @ z - red.b
        for i in np.flatnonzero(s >= -opts.active_tol):
            rows.append(red.A[i])
            slacks.append(float(s[i]))
    scale = max(1.0, float(np.abs(gf).max(initial=0.0)))
    if not rows:
        return float(np.abs(gf).max(initial=0.0)) / scale
    J = np.array(rows)
    lam, _ = nnls(J.T, -gf)
    stat = float(np.abs(gf + J.T @ lam).max(initial=0.0))
    comp = float(np.abs(lam * np.array(slacks)).max(initial=0.0))
    return max(stat, comp) / scale


class _Halt(Exception):
    def __init__(self, z):
        super().__init__("stop")
        self.z = z


class _Stall:
    """Stops SLSQP once an iterate is certified or the objective stops improving.

    Sampled or clipped objectives are only piecewise smooth, where SLSQP
    otherwise spends its whole budget on failing line searches.
    """

    def __init__(self, problem, red, opts, patience=25, check_every=5):
        self.problem, self.red, self.opts = problem, red, opts
        self.patience, self.check_every = patience, check_every
        self.best = math.inf
        self.since = 0
        self.count = 0

    def __call__(self, xk):
        z = np.asarray(xk, dtype=float)
        f = float(self.problem.objective(self.red.x(z)))
        self.count += 1
        if f < self.best - 1e-10 * (1.0 + abs(self.best if math.isfinite(self.best) else f)):
            self.best, self.since = f, 0
        else:
            self.since += 1
        if self.count % self.check_every == 0:
            v, _ = _violation(self.problem, self.red, z)
            if v <= self.opts.feas_tol and _kkt_residual(self.problem, self.red, z, self.opts) <= self.opts.kkt_tol:
                raise _Halt(z)
        if self.since >= self.patience:
            raise _Halt(z)


def _run_start(problem, red, z0, opts):
    cons = []
    if red.b.size:
        cons.append({"type": "ineq", "fun": lambda z: red.b - red.A @ z, "jac": lambda z: -red.A})
    for c in problem.constraints:
        cons.append({
            "type": "ineq",
            "fun": (lambda z, c=c: np.atleast_1d(-c.fun(red.x(z)))),
            "jac": (lambda z, c=c: np.atleast_2d(-(red.N.T @ c.jac(red.x(z))))),
        })
    if red.dim == 0:
        return z0, 0
    watch = _Stall(problem, red, opts)
    try:
        res = minimize(
            lambda z: problem.objective(red.x(z)),
            z0,
            jac=lambda z: red.N.T @ problem.gradient(red.x(z)),
            constraints=cons,
            method="SLSQP",
            callback=watch,
            options={"maxiter": opts.max_iter, "ftol": 1e-12},
        )
        z, nit = np.asarray(res.x, dtype=float), int(res.nit)
    except _Halt as stop:
        z, nit = stop.z, watch.count
    if not np.all(np.isfinite(z)):
        z = z0
    return z, nit


def solve_nlp(problem: NlpProblem, options: SolverOptions = None) -> SolveReport:
    """Multi-start local solve; the best feasible KKT point by ``(objective, start)`` wins.

    The returned point is never worse than a start that already satisfies
    every constraint.
    """
    opts = options or SolverOptions()
    t0 = time.perf_counter()
    nx = problem.x0.size
    try:
        red = _Reduced(problem.linear, nx)
        base = _phase1(red)
    except _Phase1Error as exc:
        return SolveReport(x=problem.x0.copy(), objective=float("nan"), success=False,
                           message=f"phase-1 infeasible: {exc}", kkt_residual=float("inf"),
                           max_violation=float("inf"), iterations=0,
                           wall_time=time.perf_counter() - t0, seed=opts.seed)
    z_first = red.project(red.z(problem.x0))
    if red.b.size and np.any(red.A @ z_first > red.b + 1e-9):
        z_first = base
    starts = [z_first]
    for w in problem.extra_starts:
        zw = red.project(red.z(w))
        if not red.b.size or np.all(red.A @ zw <= red.b + 1e-9):
            starts.append(zw)
    rng = np.random.default_rng(opts.seed)
    for _ in range(max(opts.starts - len(starts), 0)):
        pert = opts.start_scale * rng.standard_normal(red.dim) * (1.0 + np.abs(z_first))
        starts.append(red.project(z_first + pert))

    candidates = []
    total_iter = 0
    for k, z0 in enumerate(starts):
        f0 = float(problem.objective(red.x(z0)))
        v0, _ = _violation(problem, red, z0)
        z, nit = _run_start(problem, red, z0, opts)
        total_iter += nit
        f = float(problem.objective(red.x(z)))
        v, _ = _violation(problem, red, z)
        if v0 <= opts.feas_tol and (v > opts.feas_tol or f > f0 + 1e-10):
            z, f, v = z0, f0, v0
        kkt = _kkt_residual(problem, red, z, opts)
        candidates.append((k, z, f, v, kkt, nit))

    feasible = [c for c in candidates if c[3] <= opts.feas_tol and math.isfinite(c[2])]
    if feasible:
        k, z, f, v, kkt, nit = min(feasible, key=lambda c: (c[2], c[0]))
        # a certified point within rounding of the best value beats an uncertified one
        near = [c for c in feasible if c[4] <= opts.kkt_tol and c[2] <= f + 1e-6 * (1.0 + abs(f))]
        if near and kkt > opts.kkt_tol:
            k, z, f, v, kkt, nit = min(near, key=lambda c: (c[2], c[0]))
    else:
        k, z, f, v, kkt, nit = min(candidates, key=lambda c: (c[3], c[0]))
    _, parts = _violation(problem, red, z)
    success = v <= opts.feas_tol and kkt <= opts.kkt_tol
    if success:
        msg = "converged"
    elif v > opts.feas_tol:
        msg = f"no start reached a feasible point (best violation {v:.3e})"
    else:
        msg = f"feasible point found but KKT residual {kkt:.3e} exceeds {opts.kkt_tol:.1e}"
    return SolveReport(
        x=red.x(z), objective=f, success=bool(success), message=msg, kkt_residual=kkt,
        max_violation=v, iterations=total_iter, wall_time=time.perf_counter() - t0,
        seed=opts.seed, start_index=k, residuals=parts,
        diagnostics={"starts": [{"start": c[0], "objective": c[2], "violation": c[3], "kkt": c[4],
                                 "iterations": c[5]} for c in candidates]},
    )


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _evaluate(fun, pts):
    try:
        out = np.asarray(fun(*pts), dtype=float)
        if out.shape == np.broadcast(*pts).shape:
            return out
    except (TypeError, ValueError):
        pass
    flat = [np.ravel(p) for p in np.broadcast_arrays(*pts)]
    return np.array([float(fun(*v)) for v in zip(*flat)]).reshape(np.broadcast(*pts).shape)


def grid_search(objective, box, resolution=200, feasible=None, zoom=True, golden_iter=60):
    """Minimize over a box in at most two variables by exhaustive gridding.

    ``objective`` and ``feasible`` take one argument per axis and may be
    vectorized.  The best grid point (first in C order among ties) is
    followed by a zoomed grid over its neighbouring cells and one golden-
    section pass per axis; refinement only ever accepts strictly better
    feasible points.

    Returns
    -------
    point : ndarray
    value : float
    """
    box = [tuple(map(float, b)) for b in box]
    if not 1 <= len(box) <= 2:
        raise ValueError("grid_search handles one or two variables")
    if resolution < 100:
        raise ValueError("resolution must be at least 100 per axis")

    def masked(*pts):
        val = _evaluate(objective, pts)
        if feasible is not None:
            ok = _evaluate(feasible, pts).astype(bool)
            val = np.where(ok, val, np.inf)
        return val

    def best_on(axes):
        mesh = np.meshgrid(*axes, indexing="ij")
        val = masked(*mesh)
        idx = int(np.argmin(val))  # first minimum in C order
        if not np.isfinite(val.flat[idx]):
            return None, np.inf
        return np.array([m.flat[idx] for m in mesh]), float(val.flat[idx])

    axes = [np.linspace(lo, hi, resolution + 1) for lo, hi in box]
    point, value = best_on(axes)
    if point is None:
        raise ValueError("no feasible grid point")
    steps = [(hi - lo) / resolution for lo, hi in box]
    if zoom:
        local = [np.linspace(max(lo, c - 2 * h), min(hi, c + 2 * h), resolution + 1)
                 for (lo, hi), c, h in zip(box, point, steps)]
        p2, v2 = best_on(local)
        if p2 is not None and v2 < value:
            point, value = p2, v2
        steps = [4 * h / resolution for h in steps]
    for ax, (lo, hi) in enumerate(box):
        a, b = max(lo, point[ax] - steps[ax]), min(hi, point[ax] + steps[ax])

        def line(v, ax=ax):
            q = [np.array(c) for c in point]
            q[ax] = np.array(v)
            return float(masked(*q))

        c, d = b - _GOLDEN * (b - a), a + _GOLDEN * (b - a)
        fc, fd = line(c), line(d)
        for _ in range(golden_iter):
            for cand, fv in ((c, fc), (d, fd)):
                if fv < value:
                    point = point.copy()
                    point[ax] = cand
                    value = fv
            if fc <= fd:
                b, d, fd = d, c, fc
                c = b - _GOLDEN * (b - a)
                fc = line(c)
            else:
                a, c, fc = c, d, fd
                d = a + _GOLDEN * (b - a)
                fd = line(d)
    return point, value
