"""The four approximating formulations, the truncated-noise variant and the value-chain check.

=========  =========================================================  =====================
kind       feasible rules                                              objective
=========  =========================================================  =====================
P1         group-2 probability >= p, hard rows almost surely           expected cost ``J``
P2         joint probability of group 2 and hard rows >= p             ``J``, then projected
P3         as P2                                                       cost of projected rule
P4         group-2 probability of the projected rule >= p              cost of projected rule
P_TRUNC    truncated noise: rectangle probability >= p * P(S),         truncated cost
           hard rows robust over the support S
=========  =========================================================  =====================

P3 and P4 need hard rows that are plain per-stage bounds, for which the
projection is a clip.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .gaussian import (
    DEFAULT_POINTS,
    VAR_TOL,
    GaussianSpec,
    TruncationRegion,
    sample_noise,
    system_probability,
    system_probability_gradient,
    truncated_scalar_mean,
    truncation_mass,
)
from .projection import project_box, project_scenario
from .reformulation import (
    HARD,
    PROB,
    AffineMap,
    LinearDecisionRule,
    LinearSystem,
    StageSystem,
    affine_map,
    box_bounds,
    clip_mean_partials,
    hard_polyhedral,
    linear_cost,
    objective_gradient,
    objective_value,
    scalar_clip_mean,
)
from .solver import Constraint, NlpProblem, SolveReport, SolverOptions, solve_nlp
from .timeseries import CompactForm

__all__ = [
    "KINDS",
    "ProblemInstance",
    "SolveReport",
    "ChainVerdict",
    "build_p1",
    "build_p2",
    "build_p3",
    "build_p4",
    "build_truncated",
    "build_problem",
    "post_project",
    "box_support_max",
    "ellipsoid_support_max",
    "policy_feasibility",
    "value_chain_check",
    "decision_map",
    "P4_MAX_COMPONENTS",
]

KINDS = ("P1", "P2", "P3", "P4", "P_TRUNC")
P4_MAX_COMPONENTS = 8
DEFAULT_SAA = 20_000
# clipped-rule costs flatten out as coefficients grow, so P3/P4 keep them in a box
COEF_BOUND = 1e3


# ---------------------------------------------------------------- shared pieces

def decision_map(stage: StageSystem, cf: CompactForm) -> AffineMap:
    """Decisions ``y = G(x) eps + g(x)`` of all stages stacked (``G0 = 0``, ``g0 = 0``)."""
    n, M = stage.n, stage.M
    nx = LinearDecisionRule.size(n, M)
    Fidx, fidx = LinearDecisionRule.index_map(n, M)
    N, d = sum(n), M * stage.T
    dG = np.zeros((nx, N, d))
    dg = np.zeros((nx, N))
    row = 0
    for t, nt in enumerate(n):
        Th, mu = cf.theta_stack(t), cf.mu_stack(t)
        for i in range(nt):
            dg[fidx[t][i], row] = 1.0
            for k in range(M * t):
                dG[Fidx[t][i, k], row] = Th[k]
                dg[Fidx[t][i, k], row] = mu[k]
            row += 1
    offsets = np.concatenate([[0], np.cumsum(n)]).astype(int)
    return AffineMap(G0=np.zeros((N, d)), dG=dG, g0=np.zeros(N), dg=dg, offsets=offsets)


@dataclass
class _Stacked:
    """Rows of one group as ``A z + B xi - b`` with ``z`` and ``xi`` flattened over stages."""

    A: np.ndarray
    B: np.ndarray
    b: np.ndarray

    @classmethod
    def of(cls, stage, grp):
        n, M, T = stage.n, stage.M, stage.T
        col = np.concatenate([[0], np.cumsum(n)]).astype(int)
        L = grp.total_rows
        off = grp.stage_offsets()
        A = np.zeros((L, col[-1]))
        B = np.zeros((L, M * T))
        for t in range(T):
            r = slice(off[t], off[t + 1])
            for tau in range(t + 1):
                A[r, col[tau]:col[tau + 1]] = grp.A[t][tau]
                B[r, M * tau:M * (tau + 1)] = grp.B[t][tau]
        b = np.concatenate(grp.b) if L else np.zeros(0)
        return cls(A, B, b)

    def residual(self, z, xi):
        return z @ self.A.T + xi @ self.B.T - self.b


def _split_deterministic(amap: AffineMap):
    """Separate rows that never involve noise; they become linear inequalities in ``x``."""
    nx = amap.dG.shape[0]
    if amap.rows == 0:
        return None, LinearSystem.empty(nx)
    structural = ~np.any(amap.G0 != 0, axis=1) & ~np.any(amap.dG != 0, axis=(0, 2))
    lin = LinearSystem(np.zeros((0, nx)), np.zeros(0), -amap.dg[:, structural].T, amap.g0[structural].copy())
    rest = np.flatnonzero(~structural)
    return (amap.restrict(rest) if rest.size else None), lin


def _coefficient_box(nx, bound=COEF_BOUND):
    eye = np.eye(nx)
    return LinearSystem(np.zeros((0, nx)), np.zeros(0), np.vstack([eye, -eye]), np.full(2 * nx, float(bound)))


class _Memo:
    """Cache a function of ``x`` at the last point it was called with."""

    def __init__(self, fun):
        self.fun = fun
        self.key = None
        self.out = None

    def __call__(self, x):
        key = np.asarray(x, dtype=float).tobytes()
        if key != self.key:
            self.out = self.fun(np.asarray(x, dtype=float))
            self.key = key
        return self.out


def box_support_max(x, lower, upper):
    """``max_{lower <= e <= upper} x . e`` in closed form."""
    x = np.asarray(x, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if np.any(lower > upper):
        raise ValueError("box needs lower <= upper")
    # the maximizing vertex takes the upper bound wherever x is positive
    return float(x @ np.where(x > 0, upper, lower))


def ellipsoid_support_max(w, center, shape, radius):
    """``max w . e`` over ``{(e - center)^T shape^{-1} (e - center) <= radius^2}``."""
    w = np.asarray(w, dtype=float)
    shape = np.atleast_2d(np.asarray(shape, dtype=float))
    try:
        np.linalg.cholesky(shape)
    except np.linalg.LinAlgError:
        raise ValueError("ellipsoid shape must be positive definite") from None
    return float(np.asarray(center, dtype=float) @ w + radius * math.sqrt(max(w @ shape @ w, 0.0)))


# ------------------------------------------------------------------ instances

@dataclass
class ProblemInstance:
    """A built formulation ready for :func:`solve_nlp`.

    ``probability(x)`` evaluates the constrained probability (for P_TRUNC the
    conditional probability given ``eps in S``) at a rule vector ``x``.
    """

    kind: str
    stage: StageSystem
    cf: CompactForm
    spec: GaussianSpec
    nlp: NlpProblem
    nx: int
    probability: callable = None
    level: float = None
    trunc: TruncationRegion = None
    bounds: tuple = None
    saa_n: int = 0
    seed: int = 0
    qmc_points: int = DEFAULT_POINTS
    info: dict = field(default_factory=dict)
    cost: callable = None  # cost of the applied (projected where relevant) policy

    def rule(self, x):
        return LinearDecisionRule.from_vector(np.asarray(x)[:self.nx], self.stage.n, self.stage.M)

    def solve(self, options: SolverOptions = None, warm_starts=()):
        opts = options or SolverOptions(seed=self.seed)
        starts = [self._extend(w) for w in warm_starts]
        self.nlp.extra_starts = starts
        report = solve_nlp(self.nlp, opts)
        report.kind = self.kind
        x = report.x[:self.nx]
        if self.probability is not None:
            report.probability = float(self.probability(x))
        report.diagnostics["level"] = self.level
        report.diagnostics.update({k: v for k, v in self.info.items() if not callable(v)})
        if self.nx < report.x.size:
            report.diagnostics["auxiliary"] = report.x[self.nx:].tolist()
            report.x = x
        if self.kind == "P2":
            report = post_project(self, report)
        return report

    def _extend(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size == self.nlp.x0.size:
            return x
        ext = self.info.get("extend")
        return ext(x) if ext else np.concatenate([x, self.nlp.x0[x.size:]])


def _check_p(stage):
    if not 0.0 <= stage.p < 1.0:
        raise ValueError("probability level must lie in [0, 1)")


def _start_point(stage, nx):
    bb = box_bounds(stage)
    x0 = np.zeros(nx)
    if bb is None:
        return x0
    _, fidx = LinearDecisionRule.index_map(stage.n, stage.M)
    for t, (lo, hi) in enumerate(zip(*bb)):
        mid = np.where(np.isfinite(lo) & np.isfinite(hi), 0.5 * (lo + hi),
                       np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0)))
        x0[fidx[t]] = mid
    return x0


def _probability_constraint(maps, spec, level, qmc_points, seed, trunc=None):
    """``level - P(rows) <= 0`` summed over the given affine systems (all must hold)."""

    def value(x):
        return sum(system_probability(amap.at(x), spec, trunc, qmc_points, seed) for amap in maps)

    def gradient(x):
        grad = np.zeros(x.size)
        for amap in maps:
            grad += system_probability_gradient(amap, x, spec, trunc, qmc_points, seed, strict=False,
                                                grad_points=_grad_points(qmc_points))[1]
        return grad

    vmemo, gmemo = _Memo(value), _Memo(gradient)
    con = Constraint(fun=lambda x: level - vmemo(x), jac=lambda x: -gmemo(x), name="probability")
    return con, (lambda x: vmemo(np.asarray(x, dtype=float)))


def _grad_points(qmc_points):
    return max(qmc_points // 4, 2000)


def _joint_map(stage, cf):
    """Group-2 rows and hard rows without their current-stage noise, stacked."""
    maps = [affine_map(stage, PROB, cf), affine_map(stage, HARD, cf, include_current_noise=False)]
    return AffineMap.stack([m for m in maps if m.rows])


def build_p1(stage: StageSystem, cf: CompactForm, spec: GaussianSpec, qmc_points=DEFAULT_POINTS, seed=0):
    """Expected cost under group-2 probability and almost-sure hard rows (linearized exactly)."""
    if not stage.wait_and_see:
        raise ValueError("P1 needs hard rows free of current-stage noise")
    _check_p(stage)
    nx = LinearDecisionRule.size(stage.n, stage.M)
    rand, lin_det = _split_deterministic(affine_map(stage, PROB, cf))
    lin = LinearSystem.combine(hard_polyhedral(stage, cf), lin_det)
    cons, prob = [], None
    if rand is not None:
        con, prob = _probability_constraint([rand], spec, stage.p, qmc_points, seed)
        cons.append(con)
    nlp = NlpProblem(
        x0=_start_point(stage, nx),
        objective=lambda x: objective_value(stage, cf, x),
        gradient=lambda x: objective_gradient(stage, cf, x),
        constraints=cons, linear=lin, name="P1",
    )
    return ProblemInstance("P1", stage, cf, spec, nlp, nx, probability=prob or (lambda x: 1.0),
                           level=stage.p, seed=seed, qmc_points=qmc_points,
                           cost=lambda x: objective_value(stage, cf, x))


def build_p2(stage: StageSystem, cf: CompactForm, spec: GaussianSpec, qmc_points=DEFAULT_POINTS, seed=0,
             saa_n=DEFAULT_SAA):
    """Expected cost under the joint probability of group-2 and hard rows; solutions get projected."""
    _check_p(stage)
    nx = LinearDecisionRule.size(stage.n, stage.M)
    rand, lin = _split_deterministic(_joint_map(stage, cf))
    cons, prob = [], None
    if rand is not None:
        con, prob = _probability_constraint([rand], spec, stage.p, qmc_points, seed)
        cons.append(con)
    nlp = NlpProblem(
        x0=_start_point(stage, nx),
        objective=lambda x: objective_value(stage, cf, x),
        gradient=lambda x: objective_gradient(stage, cf, x),
        constraints=cons, linear=lin, name="P2",
    )
    bb = box_bounds(stage)
    if bb is not None:
        proj_cost = _ProjectedCost(stage, cf, spec, bb, saa_n, seed)
        cost = proj_cost.value
    else:
        cost = _SampledProjectedCost(stage, cf, spec, min(saa_n, 2000), seed).value
    return ProblemInstance("P2", stage, cf, spec, nlp, nx, probability=prob or (lambda x: 1.0),
                           level=stage.p, bounds=bb, saa_n=saa_n, seed=seed, qmc_points=qmc_points,
                           cost=cost)


def post_project(instance: ProblemInstance, report: SolveReport) -> SolveReport:
    """Replace the inner objective by the cost of the projected policy."""
    x = report.x[:instance.nx]
    inner = report.objective
    report.diagnostics["inner_objective"] = inner
    report.objective = float(instance.cost(x))
    if instance.stage.wait_and_see:
        report.diagnostics["projection_identity"] = bool(hard_polyhedral(instance.stage, instance.cf).satisfied(x))
    return report


class _ProjectedCost:
    """Expected cost of the clipped rule.

    The linear part is exact (clip means of Gaussian decisions).  The
    penalty is the exact penalty of the unclipped rule plus a frozen-sample
    average of the change caused by clipping, which vanishes wherever the
    rule never leaves its bounds.
    """

    def __init__(self, stage, cf, spec, bounds, saa_n, seed):
        self.stage, self.cf = stage, cf
        self.Sigma = cf.Sigma
        self.ymap = decision_map(stage, cf)
        self.lo = np.concatenate(bounds[0])
        self.hi = np.concatenate(bounds[1])
        self.h = np.concatenate(stage.h)
        self.soft = _Stacked.of(stage, stage.soft)
        self.w = np.concatenate(stage.penalty) if stage.soft.total_rows else np.zeros(0)
        self.has_penalty = bool(np.any(self.w))
        self.lin = linear_cost(stage, cf)
        if self.has_penalty:
            self.eps = sample_noise(spec, saa_n, seed)
            theta = np.vstack(cf.Theta)
            self.xi = cf.mu_tilde.reshape(-1) + self.eps @ theta.T
            self.xi_part = self.xi @ self.soft.B.T - self.soft.b
        self.memo = _Memo(self._evaluate)

    def value(self, x):
        return self.memo(x)[0]

    def gradient(self, x):
        return self.memo(x)[1]

    def _evaluate(self, x):
        ym = self.ymap
        G, g = ym.G(x), ym.g(x)
        sig = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", G, self.Sigma, G), 0.0))
        val = float(self.h @ scalar_clip_mean(self.lo, self.hi, g, sig))
        dm, ds = clip_mean_partials(self.lo, self.hi, g, sig)
        grad = ym.dg @ (self.h * dm)
        pos = sig > 0
        if np.any(pos):
            dsig = np.einsum("kjd,jd->kj", ym.dG[:, pos], G[pos] @ self.Sigma) / sig[pos]
            grad = grad + dsig @ (self.h[pos] * ds[pos])
        if not self.has_penalty:
            return val, grad
        val += objective_value(self.stage, self.cf, x) - float(self.lin @ x)
        grad = grad + objective_gradient(self.stage, self.cf, x) - self.lin
        Y = self.eps @ G.T + g
        D = np.clip(Y, self.lo, self.hi)
        Rd = D @ self.soft.A.T + self.xi_part
        Ry = Y @ self.soft.A.T + self.xi_part
        S = Y.shape[0]
        val += float((np.maximum(Rd, 0.0) @ self.w - np.maximum(Ry, 0.0) @ self.w).mean())
        inside = (Y > self.lo) & (Y < self.hi)
        C = ((Rd > 0) * self.w) @ self.soft.A * inside - ((Ry > 0) * self.w) @ self.soft.A
        grad = grad + np.einsum("jd,kjd->k", C.T @ self.eps / S, ym.dG) + ym.dg @ C.mean(axis=0)
        return val, grad


class _SampledProjectedCost:
    """Cost of the scenario-projected rule by frozen-sample averaging (general hard rows)."""

    def __init__(self, stage, cf, spec, n, seed):
        self.stage = stage
        self.eps = sample_noise(spec, n, seed)
        self.xi = cf.xi_from_eps(self.eps)
        self.h = np.concatenate(stage.h)
        self.soft = _Stacked.of(stage, stage.soft)
        self.w = np.concatenate(stage.penalty) if stage.soft.total_rows else np.zeros(0)

    def value(self, x):
        rule = LinearDecisionRule.from_vector(x, self.stage.n, self.stage.M)
        Z = np.array([np.concatenate(project_scenario(rule, s, self.stage, i)) for i, s in enumerate(self.xi)])
        cost = Z @ self.h
        if self.w.size:
            R = self.soft.residual(Z, self.xi.reshape(len(Z), -1))
            cost = cost + np.maximum(R, 0.0) @ self.w
        return float(cost.mean())


def _require_box(stage, kind):
    bb = box_bounds(stage)
    if bb is None:
        raise ValueError(f"{kind} needs hard rows that are plain per-stage bounds")
    for t, (lo, hi) in enumerate(zip(*bb)):
        if np.any(lo > hi):
            raise ValueError(f"stage {t + 1}: hard bounds are empty")
    return bb


def build_p3(stage: StageSystem, cf: CompactForm, spec: GaussianSpec, saa_n=DEFAULT_SAA, seed=0,
             qmc_points=DEFAULT_POINTS):
    """Cost of the clipped rule under the same joint probability as P2."""
    _check_p(stage)
    bb = _require_box(stage, "P3")
    nx = LinearDecisionRule.size(stage.n, stage.M)
    rand, lin = _split_deterministic(_joint_map(stage, cf))
    cons, prob = [], None
    if rand is not None:
        con, prob = _probability_constraint([rand], spec, stage.p, qmc_points, seed)
        cons.append(con)
    pc = _ProjectedCost(stage, cf, spec, bb, saa_n, seed)
    nlp = NlpProblem(x0=_start_point(stage, nx), objective=pc.value, gradient=pc.gradient,
                     constraints=cons, linear=LinearSystem.combine(lin, _coefficient_box(nx)), name="P3")
    return ProblemInstance("P3", stage, cf, spec, nlp, nx, probability=prob or (lambda x: 1.0),
                           level=stage.p, bounds=bb, saa_n=saa_n, seed=seed, qmc_points=qmc_points,
                           cost=pc.value)


class _PartitionProbability:
    """Probability that the clipped rule satisfies group 2, summed over clip regimes.

    Each decision component is below its lower bound (regime 1), inside
    (regime 2) or above its upper bound (regime 3).  Within a regime the
    clipped decision is affine in the noise, so each term is a Gaussian
    rectangle probability.  Components with zero variance at the current
    rule sit in one known regime and are not enumerated.
    """

    def __init__(self, stage, cf, spec, bounds, qmc_points, seed):
        self.ymap = decision_map(stage, cf)
        self.lo = np.concatenate(bounds[0])
        self.hi = np.concatenate(bounds[1])
        self.N = self.lo.size
        self.prob = _Stacked.of(stage, stage.prob)
        self.theta = np.vstack(cf.Theta)
        self.mu = cf.mu_tilde.reshape(-1)
        self.Sigma = cf.Sigma
        self.spec, self.qmc, self.seed = spec, qmc_points, seed
        self._maps = {}
        self.vmemo, self.gmemo = _Memo(self._value), _Memo(self._gradient)

    def _regime_rows(self, j, r):
        dG, dg = self.ymap.dG[:, j], self.ymap.dg[:, j]
        rows = []
        if r == 1:
            rows.append((dG, self.lo[j], -dg))
        elif r == 3:
            rows.append((-dG, -self.hi[j], dg))
        else:
            if np.isfinite(self.hi[j]):
                rows.append((dG, self.hi[j], -dg))
            if np.isfinite(self.lo[j]):
                rows.append((-dG, -self.lo[j], dg))
        return rows

    def regime_map(self, regime, enumerated, with_constraints=True):
        key = (regime, enumerated, with_constraints)
        if key in self._maps:
            return self._maps[key]
        nx, _, d = self.ymap.dG.shape
        reg = np.array(regime)
        inside = (reg == 2).astype(float)
        const = np.where(reg == 1, self.lo, np.where(reg == 3, self.hi, 0.0))
        parts = []
        if with_constraints and self.prob.b.size:
            AD = self.prob.A * inside
            G0 = self.prob.B @ self.theta
            dG = np.einsum("lj,kjd->kld", AD, self.ymap.dG)
            g0 = self.prob.b - self.prob.B @ self.mu - self.prob.A @ np.where(reg == 2, 0.0, const)
            dg = -np.einsum("lj,kj->kl", AD, self.ymap.dg)
            parts.append(AffineMap(G0=G0, dG=dG, g0=g0, dg=dg))
        rows = [rw for j in range(self.N) if enumerated[j] for rw in self._regime_rows(j, regime[j])]
        if rows:
            parts.append(AffineMap(
                G0=np.zeros((len(rows), d)),
                dG=np.stack([r[0] for r in rows], axis=1),
                g0=np.array([r[1] for r in rows]),
                dg=np.stack([r[2] for r in rows], axis=1),
            ))
        amap = AffineMap.stack(parts) if parts else None
        self._maps[key] = amap
        return amap

    def regimes(self, x):
        G, g = self.ymap.G(x), self.ymap.g(x)
        var = np.einsum("ij,jk,ik->i", G, self.Sigma, G)
        enumerated = tuple(bool(v > VAR_TOL) for v in var)
        choices = []
        for j in range(self.N):
            if enumerated[j]:
                choices.append([r for r, ok in ((1, np.isfinite(self.lo[j])), (2, True),
                                                (3, np.isfinite(self.hi[j]))) if ok])
            elif g[j] < self.lo[j]:
                choices.append([1])
            elif g[j] > self.hi[j]:
                choices.append([3])
            else:
                choices.append([2])
        return enumerated, list(itertools.product(*choices))

    def _value(self, x):
        enumerated, regs = self.regimes(x)
        total = 0.0
        for reg in regs:
            amap = self.regime_map(reg, enumerated)
            total += 1.0 if amap is None else system_probability(amap.at(x), self.spec, None, self.qmc, self.seed)
        return total

    def _gradient(self, x):
        enumerated, regs = self.regimes(x)
        grad = np.zeros(x.size)
        for reg in regs:
            amap = self.regime_map(reg, enumerated)
            if amap is not None:
                grad += system_probability_gradient(amap, x, self.spec, None, self.qmc, self.seed, strict=False,
                                                    grad_points=_grad_points(self.qmc))[1]
        return grad

    def value(self, x):
        return self.vmemo(np.asarray(x, dtype=float))

    def gradient(self, x):
        return self.gmemo(np.asarray(x, dtype=float))

    def mass(self, x):
        """Total probability of all regimes and its accumulated error estimate."""
        enumerated, regs = self.regimes(np.asarray(x, dtype=float))
        total, err = 0.0, 0.0
        for reg in regs:
            amap = self.regime_map(reg, enumerated, with_constraints=False)
            if amap is None:
                total += 1.0
                continue
            p, e = system_probability(amap.at(x), self.spec, qmc_points=self.qmc, seed=self.seed,
                                      return_error=True)
            total += p
            err += e
        return total, err


def build_p4(stage: StageSystem, cf: CompactForm, spec: GaussianSpec, saa_n=DEFAULT_SAA, seed=0,
             qmc_points=DEFAULT_POINTS):
    """Cost of the clipped rule under the group-2 probability of the clipped rule."""
    _check_p(stage)
    bb = _require_box(stage, "P4")
    if sum(stage.n) > P4_MAX_COMPONENTS:
        raise ValueError(f"P4 enumerates 3^{sum(stage.n)} regimes; at most {P4_MAX_COMPONENTS} "
                         "decision components are supported")
    nx = LinearDecisionRule.size(stage.n, stage.M)
    part = _PartitionProbability(stage, cf, spec, bb, qmc_points, seed)
    cons = []
    if stage.prob.total_rows:
        cons.append(Constraint(fun=lambda x: stage.p - part.value(x), jac=lambda x: -part.gradient(x),
                               name="probability"))
    pc = _ProjectedCost(stage, cf, spec, bb, saa_n, seed)
    nlp = NlpProblem(x0=_start_point(stage, nx), objective=pc.value, gradient=pc.gradient,
                     constraints=cons, linear=_coefficient_box(nx), name="P4")
    return ProblemInstance("P4", stage, cf, spec, nlp, nx, probability=part.value, level=stage.p, bounds=bb,
                           saa_n=saa_n, seed=seed, qmc_points=qmc_points,
                           info={"partition_mass": part.mass}, cost=pc.value)


# ------------------------------------------------------------- truncated noise

class _TruncatedCost:
    """Expected cost under truncated noise: exact linear part, frozen-sample penalty."""

    def __init__(self, stage, cf, spec, trunc, saa_n, seed):
        self.ymap = decision_map(stage, cf)
        self.h = np.concatenate(stage.h)
        cov = spec.cov
        diag = np.allclose(cov, np.diag(np.diag(cov)))
        self.eps = sample_noise(spec, saa_n, seed, trunc=trunc)
        if trunc.kind == "box" and diag:
            sd = np.sqrt(np.diag(cov))
            self.mean = np.array([truncated_scalar_mean(0.0, s, lo, hi) if s > 0 else 0.0
                                  for s, lo, hi in zip(sd, trunc.lower, trunc.upper)])
            self.mean_method = "closed form"
        else:
            self.mean = self.eps.mean(axis=0)
            self.mean_method = "sample average"
        self.lin = np.einsum("kjd,d->kj", self.ymap.dG, self.mean) + self.ymap.dg
        self.soft = _Stacked.of(stage, stage.soft)
        self.w = np.concatenate(stage.penalty) if stage.soft.total_rows else np.zeros(0)
        theta = np.vstack(cf.Theta)
        self.xi_part = (cf.mu_tilde.reshape(-1) + self.eps @ theta.T) @ self.soft.B.T - self.soft.b

    def value(self, x):
        val = float(self.h @ (self.lin.T @ x))
        if np.any(self.w):
            G, g = self.ymap.G(x), self.ymap.g(x)
            R = (self.eps @ G.T + g) @ self.soft.A.T + self.xi_part
            val += float((np.maximum(R, 0.0) @ self.w).mean())
        return val

    def gradient(self, x):
        grad = self.lin @ self.h
        if np.any(self.w):
            G, g = self.ymap.G(x), self.ymap.g(x)
            R = (self.eps @ G.T + g) @ self.soft.A.T + self.xi_part
            C = ((R > 0) * self.w) @ self.soft.A
            S = R.shape[0]
            grad = grad + np.einsum("jd,kjd->k", C.T @ self.eps / S, self.ymap.dG) + self.ymap.dg @ C.mean(0)
        return grad


def _robust_box_rows(amap, trunc, nx):
    """Linear rows in ``(x, z)`` with ``z >= |G(x)|`` on the x-dependent entries."""
    L, d = amap.G0.shape
    mid = 0.5 * (trunc.lower + trunc.upper)
    rad = 0.5 * (trunc.upper - trunc.lower)
    varying = np.any(amap.dG != 0, axis=0) & (rad > 0)  # (L, d)
    aux = np.argwhere(varying)
    nz = len(aux)
    A_rows, b_rows = [], []
    zpos = {tuple(p): nx + i for i, p in enumerate(aux)}
    for j in range(L):
        row = np.zeros(nx + nz)
        row[:nx] = amap.dG[:, j] @ mid - amap.dg[:, j]
        const = amap.G0[j] @ mid + np.abs(amap.G0[j][~varying[j]]) @ rad[~varying[j]]
        for c in np.flatnonzero(varying[j]):
            row[zpos[(j, c)]] = rad[c]
        A_rows.append(row)
        b_rows.append(amap.g0[j] - const)
    for (j, c), k in zpos.items():
        for sgn in (1.0, -1.0):
            row = np.zeros(nx + nz)
            row[:nx] = sgn * amap.dG[:, j, c]
            row[k] = -1.0
            A_rows.append(row)
            b_rows.append(-sgn * amap.G0[j, c])
    A = np.array(A_rows).reshape(-1, nx + nz)
    b = np.array(b_rows)

    def extend(x):
        G = amap.G(x[:nx])
        return np.concatenate([x[:nx], [abs(G[j, c]) for j, c in aux]])

    return LinearSystem(np.zeros((0, nx + nz)), np.zeros(0), A, b), nz, extend


def _robust_ellipsoid_constraints(amap, trunc, nx, smooth=1e-8):
    """Smoothed conic rows ``mu.G + kappa sqrt(G S G^T + s^2) <= g``; slightly conservative."""
    cons = []
    S, mu, kappa = trunc.shape, trunc.center, trunc.radius
    s2 = smooth * smooth
    for j in range(amap.rows):
        def fun(x, j=j):
            Gj = amap.G0[j] + x[:nx] @ amap.dG[:, j]
            return float(mu @ Gj + kappa * math.sqrt(Gj @ S @ Gj + s2) - amap.g0[j] - x[:nx] @ amap.dg[:, j])

        def jac(x, j=j):
            Gj = amap.G0[j] + x[:nx] @ amap.dG[:, j]
            q = math.sqrt(Gj @ S @ Gj + s2)
            out = np.zeros(x.size)
            out[:nx] = amap.dG[:, j] @ (mu + kappa * (S @ Gj) / q) - amap.dg[:, j]
            return out

        cons.append(Constraint(fun=fun, jac=jac, name=f"robust row {j}"))
    return cons


def _sampled_truncated_probability(amap, eps, level, bandwidth):
    """Frozen-sample estimate of ``P(G eps <= g | eps in S)`` with a logistic-smoothed indicator."""

    def evaluate(x):
        G, g = amap.G(x), amap.g(x)
        slack = g - eps @ G.T  # (S, L)
        scale = np.sqrt(np.maximum(np.einsum("ij,ij->i", G, G), 1e-300))
        zs = slack / scale
        j = np.argmin(zs, axis=1)
        m = zs[np.arange(len(j)), j]
        s = 1.0 / (1.0 + np.exp(-np.clip(m / bandwidth, -50, 50)))
        ds = s * (1 - s) / bandwidth
        rows = np.arange(len(j))
        # d m / dx through row j: (dg - dG eps) / scale - slack * d scale / scale^2
        dG = amap.dG[:, j]  # (nx, S, d)
        dsl = amap.dg[:, j] - np.einsum("ksd,sd->ks", dG, eps)
        dscale = np.einsum("ksd,sd->ks", dG, G[j]) / scale[j]
        dm = dsl / scale[j] - slack[rows, j] * dscale / scale[j] ** 2
        return float(s.mean()), (dm * ds).mean(axis=1)

    memo = _Memo(evaluate)
    con = Constraint(fun=lambda x: level - memo(x)[0], jac=lambda x: -memo(x)[1], name="probability")
    return con


def build_truncated(stage: StageSystem, cf: CompactForm, spec: GaussianSpec, trunc: TruncationRegion,
                    saa_n=DEFAULT_SAA, seed=0, qmc_points=DEFAULT_POINTS, mc_points=1_000_000):
    """Formulation for noise truncated to a bounded box or ellipsoid.

    The probability ``P(G eps <= g | eps in S) >= p`` is written as the
    untruncated rectangle probability of the rows stacked with the box
    ``(I, -I)`` rows being at least ``p * P(eps in S)``.  Hard rows, which
    may involve current-stage noise, must hold for every ``eps`` in ``S``.
    """
    _check_p(stage)
    if trunc is None or not trunc.bounded:
        if any(np.any(stage.hard.B[t][t]) for t in range(stage.T)):
            raise ValueError("hard rows with current-stage noise need a bounded truncation region")
        raise ValueError("the truncated formulation needs a bounded truncation region")
    if (trunc.kind == "box" and trunc.lower.size != spec.dim) or \
            (trunc.kind == "ellipsoid" and trunc.center.size != spec.dim):
        raise ValueError("truncation region dimension differs from the noise dimension")
    nx = LinearDecisionRule.size(stage.n, stage.M)
    amap3 = affine_map(stage, HARD, cf)
    info = {"truncation": trunc.kind}
    cons = []
    extend = None
    if trunc.kind == "box":
        lin, nz, extend = _robust_box_rows(amap3, trunc, nx) if amap3.rows else \
            (LinearSystem.empty(nx), 0, None)
        mass = truncation_mass(spec, trunc, qmc_points, seed)
        info["mass_method"] = "rectangle"
    else:
        nz = 0
        rand3, lin = _split_deterministic(amap3)
        if rand3 is not None:
            cons.extend(_robust_ellipsoid_constraints(rand3, trunc, nx))
        mass = truncation_mass(spec, trunc, qmc_points, seed, mc_points=mc_points)
        info["mass_method"] = "monte carlo"
    level = stage.p * mass
    info.update(mass=mass, level_tilde=level)
    amap2 = affine_map(stage, PROB, cf)
    prob = None
    if amap2.rows:
        if trunc.kind == "box":
            d = spec.dim
            eye = np.eye(d)
            box_rows = AffineMap.constant(np.vstack([eye, -eye]), np.concatenate([trunc.upper, -trunc.lower]), nx)
            stacked = AffineMap.stack([amap2, box_rows])
            con, numer = _probability_constraint([stacked], spec, level, qmc_points, seed)
            prob = (lambda x: min(numer(x) / mass, 1.0))
        else:
            eps = sample_noise(spec, saa_n, seed, trunc=trunc)
            con = _sampled_truncated_probability(amap2, eps, stage.p, bandwidth=0.05)

            def prob(x, eps=eps):
                G, g = amap2.G(np.asarray(x)[:nx]), amap2.g(np.asarray(x)[:nx])
                return float(np.mean(np.all(eps @ G.T <= g, axis=1)))

            info["probability_method"] = "smoothed sample average"
        cons.append(_pad_constraint(con, nx))
    tc = _TruncatedCost(stage, cf, spec, trunc, saa_n, seed)
    info["mean_method"] = tc.mean_method
    x0 = _start_point(stage, nx)
    if extend is not None:
        x0 = extend(np.concatenate([x0, np.zeros(nz)]))
        info["extend"] = extend
    nlp = NlpProblem(
        x0=x0,
        objective=lambda x: tc.value(x[:nx]),
        gradient=lambda x: np.concatenate([tc.gradient(x[:nx]), np.zeros(nz)]),
        constraints=cons, linear=lin, name="P_TRUNC",
    )
    return ProblemInstance("P_TRUNC", stage, cf, spec, nlp, nx, probability=prob or (lambda x: 1.0),
                           level=stage.p, trunc=trunc, saa_n=saa_n, seed=seed, qmc_points=qmc_points,
                           info=info, cost=tc.value)


def _pad_constraint(con, nx):
    return Constraint(fun=lambda x: con.fun(x[:nx]),
                      jac=lambda x: np.concatenate([con.jac(x[:nx]), np.zeros(x.size - nx)]),
                      name=con.name)


def build_problem(kind, stage, cf, spec, trunc=None, saa_n=DEFAULT_SAA, seed=0, qmc_points=DEFAULT_POINTS):
    kind = kind.upper()
    if kind == "P1":
        return build_p1(stage, cf, spec, qmc_points=qmc_points, seed=seed)
    if kind == "P2":
        return build_p2(stage, cf, spec, qmc_points=qmc_points, seed=seed, saa_n=saa_n)
    if kind == "P3":
        return build_p3(stage, cf, spec, saa_n=saa_n, seed=seed, qmc_points=qmc_points)
    if kind == "P4":
        return build_p4(stage, cf, spec, saa_n=saa_n, seed=seed, qmc_points=qmc_points)
    if kind in ("P_TRUNC", "TRUNC"):
        return build_truncated(stage, cf, spec, trunc, saa_n=saa_n, seed=seed, qmc_points=qmc_points)
    raise ValueError(f"unknown problem kind {kind!r}; choose from {', '.join(KINDS)}")


# --------------------------------------------------------- verification tools

def policy_feasibility(instance: ProblemInstance, x, n=100_000, seed=12345, batch=200_000, tol=1e-9):
    """Sample-based check of the policy a formulation actually applies.

    P2, P3 and P4 apply the projected rule, the others the rule itself.
    Noise is drawn from the instance's law (truncated for P_TRUNC).

    Returns
    -------
    dict
        ``probability`` and its binomial ``std`` for group 2, and the number
        of scenarios violating a hard row by more than ``tol``.
    """
    stage, cf = instance.stage, instance.cf
    rule = instance.rule(x)
    prob_rows = _Stacked.of(stage, stage.prob)
    hard_rows = _Stacked.of(stage, stage.hard)
    project = instance.kind in ("P2", "P3", "P4")
    bb = box_bounds(stage) if project else None
    hits, bad, done, k = 0, 0, 0, 0
    while done < n:
        m = min(batch, n - done)
        eps = sample_noise(instance.spec, m, seed + k, trunc=instance.trunc)
        xi = cf.xi_from_eps(eps)
        if project:
            if bb is not None:
                z = project_box(rule, xi, bb)
                Z = np.concatenate(z, axis=-1)
            else:
                Z = np.array([np.concatenate(project_scenario(rule, s, stage, i)) for i, s in enumerate(xi)])
        else:
            Z = np.concatenate(rule.evaluate(xi), axis=-1)
        flat = xi.reshape(m, -1)
        if prob_rows.b.size:
            hits += int(np.sum(np.all(prob_rows.residual(Z, flat) <= 0.0, axis=1)))
        else:
            hits += m
        if hard_rows.b.size:
            bad += int(np.sum(np.any(hard_rows.residual(Z, flat) > tol, axis=1)))
        done += m
        k += 1
    p = hits / n
    return {"probability": p, "std": math.sqrt(max(p * (1 - p), 0.0) / n), "hard_violations": bad, "n": n}


@dataclass
class ChainVerdict:
    ok: bool
    checks: list
    values: dict
    feasibility: dict = field(default_factory=dict)

    def summary(self):
        lines = [f"{'PASS' if ok else 'FAIL'} {name}: {detail}" for name, ok, detail in self.checks]
        return "\n".join(lines)


def value_chain_check(reports, tol=1e-3, instances=None, saa_n=100_000, seed=12345):
    """Check ``phi1 >= phi3``, ``phi2 >= phi3`` and ``phi3 >= phi4`` up to ``tol``.

    ``reports`` maps kinds ``"P1"``..``"P4"`` to solve reports (or plain
    values).  With ``instances`` each returned policy is also checked by
    sampling: group-2 probability at least ``p - 3 std`` and no
    hard-row violations.
    """
    val = {k: (r.objective if isinstance(r, SolveReport) else float(r)) for k, r in reports.items()}
    prob = {k: (r.probability if isinstance(r, SolveReport) else None) for k, r in reports.items()}
    checks = []
    for hi, lo in (("P1", "P3"), ("P2", "P3"), ("P3", "P4")):
        if hi in val and lo in val:
            ok = val[hi] >= val[lo] - tol
            checks.append((f"phi_{hi[1]} >= phi_{lo[1]}", bool(ok),
                           f"{val[hi]:.6g} vs {val[lo]:.6g} (probabilities {prob[hi]}, {prob[lo]})"))
    feas = {}
    if instances:
        for k, inst in instances.items():
            if k not in reports or not isinstance(reports[k], SolveReport):
                continue
            res = policy_feasibility(inst, reports[k].x, n=saa_n, seed=seed)
            feas[k] = res
            margin = 3 * res["std"]
            ok_p = res["probability"] >= inst.level - margin
            checks.append((f"{k} probability", bool(ok_p),
                           f"{res['probability']:.5f} >= {inst.level} - {margin:.1e}"))
            checks.append((f"{k} hard rows", res["hard_violations"] == 0,
                           f"{res['hard_violations']} violating scenarios of {res['n']}"))
    return ChainVerdict(ok=all(c[1] for c in checks), checks=checks, values=val, feasibility=feas)
