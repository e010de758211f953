"""Stage data, linear decision rules and the static reformulation they induce.

Under a linear rule ``y_t = F_t xi_{1:t-1} + f_t`` and ``xi_t = mu_t + Theta_t eps``
every stage constraint ``sum A y + sum B xi <= b`` becomes ``G_t(x) eps <= g_t(x)``
with ``G``, ``g`` affine in the rule parameters ``x = (F_t, f_t)``.
:class:`AffineMap` stores that affine dependence once so that values and
gradients of probabilities and expectations can share it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .timeseries import CompactForm

__all__ = [
    "ConstraintGroup",
    "StageSystem",
    "LinearDecisionRule",
    "AffineMap",
    "AffineSystem",
    "LinearSystem",
    "affine_map",
    "assemble_affine_system",
    "scalar_clip_mean",
    "clip_mean_partials",
    "objective_value",
    "objective_gradient",
    "linear_cost",
    "hard_polyhedral",
    "static_reduction_test",
    "box_bounds",
]

SOFT, PROB, HARD = 1, 2, 3
_SQRT2PI = np.sqrt(2.0 * np.pi)


def _pdf(z):
    return np.exp(-0.5 * z * z) / _SQRT2PI


@dataclass
class ConstraintGroup:
    """Rows ``sum_tau A[t][tau] y_tau + sum_tau B[t][tau] xi_tau <= b[t]`` for each stage ``t``.

    ``A[t]`` and ``B[t]`` are lists of length ``t + 1`` (0-based ``t``).
    """

    A: list
    B: list
    b: list

    @classmethod
    def empty(cls, n, M):
        T = len(n)
        return cls(
            A=[[np.zeros((0, n[tau])) for tau in range(t + 1)] for t in range(T)],
            B=[[np.zeros((0, M)) for _ in range(t + 1)] for t in range(T)],
            b=[np.zeros(0) for _ in range(T)],
        )

    def rows(self, t):
        return self.b[t].size

    @property
    def total_rows(self):
        return sum(bt.size for bt in self.b)

    def stage_offsets(self):
        return np.concatenate([[0], np.cumsum([bt.size for bt in self.b])]).astype(int)


@dataclass
class StageSystem:
    """Problem data partitioned into penalized (1), probabilistic (2) and hard (3) rows."""

    n: list
    M: int
    soft: ConstraintGroup
    prob: ConstraintGroup
    hard: ConstraintGroup
    h: list
    penalty: list
    p: float = 0.9

    def __post_init__(self):
        self.n = [int(v) for v in self.n]
        self.h = [np.asarray(v, dtype=float).reshape(-1) for v in self.h]
        self.penalty = [np.asarray(v, dtype=float).reshape(-1) for v in self.penalty]
        for g in (self.soft, self.prob, self.hard):
            g.b = [np.asarray(v, dtype=float).reshape(-1) for v in g.b]
            g.A = [[np.asarray(a, dtype=float).reshape(g.b[t].size, self.n[tau])
                    for tau, a in enumerate(row)] for t, row in enumerate(g.A)]
            g.B = [[np.asarray(bm, dtype=float).reshape(g.b[t].size, self.M)
                    for bm in row] for t, row in enumerate(g.B)]
        self._validate()

    def _validate(self):
        T = self.T
        for name, g in (("soft", self.soft), ("prob", self.prob), ("hard", self.hard)):
            if len(g.A) != T or len(g.B) != T or len(g.b) != T:
                raise ValueError(f"{name} group must define every stage")
            for t in range(T):
                if len(g.A[t]) != t + 1 or len(g.B[t]) != t + 1:
                    raise ValueError(f"{name} group, stage {t + 1}: need matrices for tau = 1..{t + 1}")
                lt = g.b[t].size
                for tau in range(t + 1):
                    if g.A[t][tau].shape != (lt, self.n[tau]):
                        raise ValueError(
                            f"{name} group: A[{t + 1}][{tau + 1}] has shape {g.A[t][tau].shape}, "
                            f"expected {(lt, self.n[tau])}")
                    if g.B[t][tau].shape != (lt, self.M):
                        raise ValueError(
                            f"{name} group: B[{t + 1}][{tau + 1}] has shape {g.B[t][tau].shape}, "
                            f"expected {(lt, self.M)}")
        for t in range(T):
            if self.h[t].size != self.n[t]:
                raise ValueError(f"h[{t + 1}] must have length {self.n[t]}")
            if self.penalty[t].size != self.soft.b[t].size:
                raise ValueError(f"penalty[{t + 1}] must match the soft rows of stage {t + 1}")
            if np.any(self.penalty[t] < 0):
                raise ValueError("penalties must be nonnegative")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("probability level must lie in [0, 1]")

    @property
    def T(self):
        return len(self.n)

    def group(self, i):
        return {SOFT: self.soft, PROB: self.prob, HARD: self.hard}[i]

    @property
    def wait_and_see(self):
        """True when no hard row involves the not-yet-observed noise of its own stage."""
        return all(not np.any(self.hard.B[t][t]) for t in range(self.T))


@dataclass
class LinearDecisionRule:
    """``y_t = F[t] @ xi_{1:t-1} + f[t]``; ``F[0]`` has zero columns."""

    F: list
    f: list

    @classmethod
    def zeros(cls, n, M):
        return cls(F=[np.zeros((nt, M * t)) for t, nt in enumerate(n)],
                   f=[np.zeros(nt) for nt in n])

    @classmethod
    def static(cls, f, M):
        f = [np.asarray(v, dtype=float).reshape(-1) for v in f]
        return cls(F=[np.zeros((v.size, M * t)) for t, v in enumerate(f)], f=f)

    @staticmethod
    def size(n, M):
        return sum(nt * M * t + nt for t, nt in enumerate(n))

    def to_vector(self):
        parts = []
        for Ft, ft in zip(self.F, self.f):
            parts.append(np.asarray(Ft, dtype=float).ravel())
            parts.append(np.asarray(ft, dtype=float).ravel())
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, x, n, M):
        x = np.asarray(x, dtype=float)
        F, f, pos = [], [], 0
        for t, nt in enumerate(n):
            k = nt * M * t
            F.append(x[pos:pos + k].reshape(nt, M * t))
            pos += k
            f.append(x[pos:pos + nt].copy())
            pos += nt
        if pos != x.size:
            raise ValueError(f"decision vector has {x.size} entries, expected {pos}")
        return cls(F=F, f=f)

    @staticmethod
    def index_map(n, M):
        """Positions of the ``F`` and ``f`` blocks inside the flat vector."""
        Fidx, fidx, pos = [], [], 0
        for t, nt in enumerate(n):
            k = nt * M * t
            Fidx.append(np.arange(pos, pos + k).reshape(nt, M * t))
            pos += k
            fidx.append(np.arange(pos, pos + nt))
            pos += nt
        return Fidx, fidx

    def evaluate(self, xi):
        """Decisions along scenarios ``xi`` of shape ``(..., T, M)``; returns a list over stages."""
        xi = np.asarray(xi, dtype=float)
        flat = xi.reshape(xi.shape[:-2] + (-1,))
        M = xi.shape[-1]
        return [flat[..., :M * t] @ Ft.T + ft for t, (Ft, ft) in enumerate(zip(self.F, self.f))]

    @property
    def max_abs_F(self):
        return max((float(np.abs(Ft).max()) for Ft in self.F if Ft.size), default=0.0)


@dataclass
class AffineMap:
    """``G(x) = G0 + sum_k x_k dG[k]`` and ``g(x) = g0 + dg.T @ x`` for stacked stage rows."""

    G0: np.ndarray  # (L, d)
    dG: np.ndarray  # (nx, L, d)
    g0: np.ndarray  # (L,)
    dg: np.ndarray  # (nx, L)
    offsets: np.ndarray = field(default=None)  # stage row boundaries

    @property
    def rows(self):
        return self.g0.size

    def G(self, x):
        return self.G0 + np.tensordot(np.asarray(x, dtype=float), self.dG, axes=1)

    def g(self, x):
        return self.g0 + np.asarray(x, dtype=float) @ self.dg

    def at(self, x):
        return AffineSystem(G=self.G(x), g=self.g(x), structure=self, x=np.asarray(x, dtype=float))

    @classmethod
    def stack(cls, maps):
        maps = [m for m in maps if m is not None]
        return cls(
            G0=np.vstack([m.G0 for m in maps]),
            dG=np.concatenate([m.dG for m in maps], axis=1),
            g0=np.concatenate([m.g0 for m in maps]),
            dg=np.concatenate([m.dg for m in maps], axis=1),
        )

    @classmethod
    def constant(cls, G, g, nx):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        g = np.asarray(g, dtype=float).reshape(-1)
        return cls(G0=G, dG=np.zeros((nx,) + G.shape), g0=g, dg=np.zeros((nx, g.size)))

    def restrict(self, rows):
        return AffineMap(G0=self.G0[rows], dG=self.dG[:, rows], g0=self.g0[rows], dg=self.dg[:, rows])


@dataclass
class AffineSystem:
    """``G eps <= g`` evaluated at a particular rule, with the map that produced it."""

    G: np.ndarray
    g: np.ndarray
    structure: AffineMap = None
    x: np.ndarray = None

    def stage(self, t):
        o = self.structure.offsets
        return self.G[o[t]:o[t + 1]], self.g[o[t]:o[t + 1]]


def affine_map(stage: StageSystem, group, cf: CompactForm, *, include_current_noise=True) -> AffineMap:
    """Affine dependence of ``(G_t, g_t)`` on the flat rule vector, rows stacked over stages.

    ``include_current_noise=False`` drops ``B[t][t]`` (the hard rows as they
    enter the joint probability of the relaxed feasible set).
    """
    grp = stage.group(group) if isinstance(group, int) else group
    T, M, n = stage.T, stage.M, stage.n
    if cf.T != T or cf.M != M:
        raise ValueError("compact form does not match the stage data dimensions")
    d = M * T
    nx = LinearDecisionRule.size(n, M)
    Fidx, fidx = LinearDecisionRule.index_map(n, M)
    L = grp.total_rows
    off = grp.stage_offsets()
    G0 = np.zeros((L, d))
    dG = np.zeros((nx, L, d))
    g0 = np.zeros(L)
    dg = np.zeros((nx, L))
    for t in range(T):
        rows = slice(off[t], off[t + 1])
        if off[t + 1] == off[t]:
            continue
        g0[rows] = grp.b[t]
        for tau in range(t + 1):
            B = grp.B[t][tau]
            if tau == t and not include_current_noise:
                B = np.zeros_like(B)
            G0[rows] += B @ cf.Theta[tau]
            g0[rows] -= B @ cf.mu_tilde[tau]
            A = grp.A[t][tau]
            for i in range(n[tau]):
                dg[fidx[tau][i], rows] -= A[:, i]
                if tau == 0:
                    continue
                Th = cf.theta_stack(tau)
                mu = cf.mu_stack(tau)
                for j in range(M * tau):
                    k = Fidx[tau][i, j]
                    dG[k, rows] += np.outer(A[:, i], Th[j])
                    dg[k, rows] -= A[:, i] * mu[j]
    return AffineMap(G0=G0, dG=dG, g0=g0, dg=dg, offsets=off)


def assemble_affine_system(stage: StageSystem, group, cf: CompactForm, x) -> AffineSystem:
    """Evaluate ``G_t(x) eps <= g_t(x)`` for one constraint group at rule ``x``."""
    if isinstance(x, LinearDecisionRule):
        for t, Ft in enumerate(x.F):
            if Ft.shape != (stage.n[t], stage.M * t):
                raise ValueError(f"F[{t + 1}] has shape {Ft.shape}, expected {(stage.n[t], stage.M * t)}")
        x = x.to_vector()
    amap = affine_map(stage, group, cf)
    if np.size(x) != amap.dG.shape[0]:
        raise ValueError("rule vector does not match the stage dimensions")
    return amap.at(x)


def scalar_clip_mean(a, b, m, sigma):
    """``E[max(a, min(X, b))]`` for ``X ~ N(m, sigma^2)``; infinite bounds allowed."""
    a, b, m, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, m, sigma)))
    if np.any(a > b):
        raise ValueError("clip bounds must satisfy a <= b")
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    out = np.array(np.clip(m, a, b), dtype=float)
    pos = sigma > 0
    if np.any(pos):
        s, mm, aa, bb = sigma[pos], m[pos], a[pos], b[pos]
        with np.errstate(invalid="ignore", over="ignore"):
            za = (aa - mm) / s
            zb = (bb - mm) / s
            lo = np.where(np.isfinite(aa), (aa - mm) * ndtr(za) + s * _pdf(za), 0.0)
            hi = np.where(np.isfinite(bb), (bb - mm) * ndtr(-zb) - s * _pdf(zb), 0.0)
        out[pos] = mm + lo + hi
    return out if out.ndim else float(out)


def clip_mean_partials(a, b, m, sigma):
    """Partial derivatives of :func:`scalar_clip_mean` in ``m`` and ``sigma``.

    Rows with ``sigma == 0`` use ``d/dm = 1{a < m < b}`` and ``d/dsigma = 0``.
    """
    a, b, m, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, m, sigma)))
    dm = np.array((m > a) & (m < b), dtype=float)
    ds = np.zeros_like(dm)
    pos = sigma > 0
    if np.any(pos):
        s = sigma[pos]
        with np.errstate(invalid="ignore"):
            za = (a[pos] - m[pos]) / s
            zb = (b[pos] - m[pos]) / s
        dm[pos] = ndtr(zb) - ndtr(za)
        ds[pos] = np.where(np.isfinite(za), _pdf(za), 0.0) - np.where(np.isfinite(zb), _pdf(zb), 0.0)
    if dm.ndim == 0:
        return float(dm), float(ds)
    return dm, ds


class _ObjectiveData:
    """Cached linear pieces of the objective for one stage system and compact form."""

    def __init__(self, stage, cf):
        n, M = stage.n, stage.M
        nx = LinearDecisionRule.size(n, M)
        Fidx, fidx = LinearDecisionRule.index_map(n, M)
        c = np.zeros(nx)
        for t in range(stage.T):
            c[fidx[t]] += stage.h[t]
            if t:
                c[Fidx[t]] += np.outer(stage.h[t], cf.mu_stack(t))
        self.lin = c
        self.amap = affine_map(stage, SOFT, cf)
        self.weights = np.concatenate(stage.penalty) if stage.soft.total_rows else np.zeros(0)
        self.Sigma = cf.Sigma


_CACHE_ATTR = "_objective_cache"


def _objective_data(stage, cf):
    cache = getattr(stage, _CACHE_ATTR, None)
    if cache is None or cache[0] is not cf:
        cache = (cf, _ObjectiveData(stage, cf))
        object.__setattr__(stage, _CACHE_ATTR, cache)
    return cache[1]


def _as_vector(x):
    return x.to_vector() if isinstance(x, LinearDecisionRule) else np.asarray(x, dtype=float)


def _penalty_moments(data, x):
    G = data.amap.G(x)
    g = data.amap.g(x)
    var = np.einsum("ij,jk,ik->i", G, data.Sigma, G)
    if np.any(var < -1e-12):
        raise ValueError("negative variance in penalized rows (covariance not PSD)")
    return G, g, np.sqrt(np.maximum(var, 0.0))


def linear_cost(stage: StageSystem, cf: CompactForm) -> np.ndarray:
    """Coefficients ``c`` of the expected linear cost ``c @ x``."""
    return _objective_data(stage, cf).lin.copy()


def objective_value(stage: StageSystem, cf: CompactForm, x) -> float:
    """Expected cost plus expected penalized violation of the soft rows."""
    data = _objective_data(stage, cf)
    x = _as_vector(x)
    J1 = float(data.lin @ x)
    if data.weights.size == 0 or not np.any(data.weights):
        return J1
    _, g, sig = _penalty_moments(data, x)
    J2 = float(data.weights @ scalar_clip_mean(0.0, np.inf, -g, sig))
    return J1 + J2


def objective_gradient(stage: StageSystem, cf: CompactForm, x) -> np.ndarray:
    """Gradient of :func:`objective_value` in the flat rule vector."""
    data = _objective_data(stage, cf)
    x = _as_vector(x)
    grad = data.lin.copy()
    if data.weights.size == 0 or not np.any(data.weights):
        return grad
    G, g, sig = _penalty_moments(data, x)
    dm, ds = clip_mean_partials(0.0, np.inf, -g, sig)
    # d(-g)/dx = -dg ; d sigma/dx = (dG Sigma G^T)_ii / sigma
    grad -= data.amap.dg @ (data.weights * dm)
    pos = sig > 0
    if np.any(pos):
        SGt = G[pos] @ data.Sigma  # (Lp, d)
        dsig = np.einsum("kld,ld->kl", data.amap.dG[:, pos], SGt) / sig[pos]
        grad += dsig @ (data.weights[pos] * ds[pos])
    return grad


@dataclass
class LinearSystem:
    """``A_eq x = b_eq`` and ``A_ub x <= b_ub`` in the flat rule vector."""

    A_eq: np.ndarray
    b_eq: np.ndarray
    A_ub: np.ndarray
    b_ub: np.ndarray

    @classmethod
    def empty(cls, nx):
        return cls(np.zeros((0, nx)), np.zeros(0), np.zeros((0, nx)), np.zeros(0))

    @property
    def is_empty(self):
        return self.b_eq.size == 0 and self.b_ub.size == 0

    def residuals(self, x):
        x = np.asarray(x, dtype=float)
        eq = np.abs(self.A_eq @ x - self.b_eq).max(initial=0.0)
        ub = np.maximum(self.A_ub @ x - self.b_ub, 0.0).max(initial=0.0)
        return float(eq), float(ub)

    def satisfied(self, x, eq_tol=1e-9, ub_tol=1e-9):
        eq, ub = self.residuals(x)
        return eq <= eq_tol and ub <= ub_tol

    @classmethod
    def combine(cls, *systems):
        return cls(
            np.vstack([s.A_eq for s in systems]), np.concatenate([s.b_eq for s in systems]),
            np.vstack([s.A_ub for s in systems]), np.concatenate([s.b_ub for s in systems]),
        )


def hard_polyhedral(stage: StageSystem, cf: CompactForm, tol=0.0) -> LinearSystem:
    """Almost-sure hard rows under Gaussian noise as linear (in)equalities in ``x``.

    With unbounded noise a row ``G_j(x) eps <= g_j(x)`` holds almost surely iff
    ``G_j(x) = 0`` and ``g_j(x) >= 0``.  Rows that vanish identically and are
    satisfied are dropped.
    """
    if not stage.wait_and_see:
        raise ValueError("hard rows involve current-stage noise; the polyhedral form requires wait-and-see rows")
    amap = affine_map(stage, HARD, cf)
    nx, L, d = amap.dG.shape
    A_eq = amap.dG.reshape(nx, L * d).T
    b_eq = -amap.G0.reshape(L * d)
    A_ub = -amap.dg.T
    b_ub = amap.g0.copy()
    keep_eq = np.any(A_eq != 0, axis=1) | (np.abs(b_eq) > tol)
    keep_ub = np.any(A_ub != 0, axis=1) | (b_ub < -tol)
    return LinearSystem(A_eq[keep_eq], b_eq[keep_eq], A_ub[keep_ub], b_ub[keep_ub])


def static_reduction_test(cf: CompactForm, stage: StageSystem = None):
    """Check whether every stacked ``Theta_{1:t-1}`` (t >= 2) has full row rank.

    When it does and the hard rows are plain boxes, any rule satisfying them
    almost surely must have ``F_t = 0``.

    Returns
    -------
    surjective : bool
    report : list of dict
        One entry per stage ``t >= 2`` with the rank and the required rank.
    """
    report = []
    ok = True
    for t in range(2, cf.T + 1):
        Th = cf.theta_stack(t - 1)
        rank = int(np.linalg.matrix_rank(Th))
        full = rank == Th.shape[0]
        ok &= full
        report.append({"stage": t, "rank": rank, "rows": Th.shape[0], "surjective": bool(full)})
    if stage is not None and box_bounds(stage) is None:
        report.append({"note": "hard rows are not plain boxes"})
    return bool(ok), report


def box_bounds(stage: StageSystem):
    """Recognize hard rows that are plain bounds ``lo_t <= y_t <= hi_t``.

    Returns ``(lo, hi)`` lists over stages (infinite where absent) or ``None``
    when some hard row couples stages, involves noise or mixes components.
    """
    lo, hi = [], []
    grp = stage.hard
    for t in range(stage.T):
        if any(np.any(grp.B[t][tau]) for tau in range(t + 1)):
            return None
        if any(np.any(grp.A[t][tau]) for tau in range(t)):
            return None
        A, b = grp.A[t][t], grp.b[t]
        lt = np.full(stage.n[t], -np.inf)
        ut = np.full(stage.n[t], np.inf)
        for row, rhs in zip(A, b):
            nz = np.flatnonzero(row)
            if nz.size == 0:
                if rhs < 0:
                    return None
                continue
            if nz.size > 1:
                return None
            j = nz[0]
            if row[j] > 0:
                ut[j] = min(ut[j], rhs / row[j])
            else:
                lt[j] = max(lt[j], rhs / row[j])
        lo.append(lt + 0.0)  # no signed zeros from -0 / -1
        hi.append(ut + 0.0)
    return lo, hi
