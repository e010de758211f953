"""Gaussian rectangle probabilities, their gradients and truncated-normal helpers.

The workhorse is :func:`mvn_rectangle`, a separation-of-variables estimator
(sequential conditioning on a Cholesky factor) integrated with randomized
rank-1 lattice rules.  Gradients of ``P(G eps <= g)`` are reduced to values of
lower-dimensional rectangle probabilities: one conditional CDF per limit and
one bivariate-density-weighted CDF per correlation entry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .reformulation import AffineMap, AffineSystem

__all__ = [
    "GaussianSpec",
    "TruncationRegion",
    "DegenerateRowError",
    "mvn_cdf",
    "mvn_rectangle",
    "mvn_rectangle_moment",
    "system_probability",
    "system_probability_gradient",
    "truncation_mass",
    "truncated_scalar_mean",
    "sample_noise",
]

VAR_TOL = 1e-14
SIGN_TOL = 1e-12
NEAR_DEGENERATE = 1e-10
N_BATCHES = 10
DEFAULT_POINTS = 20_000
_MERGE_TOL = 1e-10
# pivots below this (on a correlation scale) mark variables fixed by earlier ones
PIVOT_TOL = 1e-10


class DegenerateRowError(ValueError):
    pass


@dataclass
class GaussianSpec:
    """Centered Gaussian law ``N(0, cov)`` of the stacked noise."""

    cov: np.ndarray

    def __post_init__(self):
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.cov.shape[0] != self.cov.shape[1] or not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ValueError("covariance must be square and symmetric")
        if self.cov.size and np.linalg.eigvalsh(self.cov).min() < -1e-12:
            raise ValueError("covariance is not positive semi-definite")

    @property
    def dim(self):
        return self.cov.shape[0]


@dataclass
class TruncationRegion:
    """Support restriction of the noise: ``none``, ``box`` or ``ellipsoid``.

    The ellipsoid is ``{e : (e - center)^T shape^{-1} (e - center) <= radius^2}``.
    """

    kind: str = "none"
    lower: np.ndarray = None
    upper: np.ndarray = None
    center: np.ndarray = None
    shape: np.ndarray = None
    radius: float = None

    def __post_init__(self):
        if self.kind not in ("none", "box", "ellipsoid"):
            raise ValueError(f"unknown truncation kind {self.kind!r}")
        if self.kind == "box":
            self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
            self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
            if self.lower.shape != self.upper.shape or np.any(self.lower > self.upper):
                raise ValueError("box truncation needs lower <= upper of equal length")
        elif self.kind == "ellipsoid":
            self.center = np.asarray(self.center, dtype=float).reshape(-1)
            self.shape = np.atleast_2d(np.asarray(self.shape, dtype=float))
            if self.radius is None or self.radius <= 0:
                raise ValueError("ellipsoid radius must be positive")
            if not np.allclose(self.shape, self.shape.T) or np.linalg.eigvalsh(self.shape).min() <= 0:
                raise ValueError("ellipsoid shape must be symmetric positive definite")

    @classmethod
    def box(cls, lower, upper):
        return cls("box", lower=lower, upper=upper)

    @classmethod
    def ellipsoid(cls, center, shape, radius):
        return cls("ellipsoid", center=center, shape=shape, radius=float(radius))

    @property
    def bounded(self):
        if self.kind == "box":
            return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))
        return self.kind == "ellipsoid"

    def contains(self, eps, tol=0.0):
        eps = np.atleast_2d(eps)
        if self.kind == "none":
            return np.ones(eps.shape[0], bool)
        if self.kind == "box":
            return np.all((eps >= self.lower - tol) & (eps <= self.upper + tol), axis=1)
        d = eps - self.center
        q = np.einsum("ni,ij,nj->n", d, np.linalg.inv(self.shape), d)
        return q <= self.radius ** 2 + tol


def _cov(spec):
    return spec.cov if isinstance(spec, GaussianSpec) else np.atleast_2d(np.asarray(spec, dtype=float))


def _primes(count):
    out, k = [], 2
    while len(out) < count:
        if all(k % p for p in out if p * p <= k):
            out.append(k)
        k += 1
    return np.array(out, dtype=float)


def _ordered_cholesky(cov, tol):
    """Cholesky factor in the given order; zero pivots mark determined variables."""
    n = cov.shape[0]
    L = np.zeros((n, n))
    scale = max(float(np.max(np.abs(np.diag(cov)))), 1.0)
    for j in range(n):
        d = cov[j, j] - L[j, :j] @ L[j, :j]
        if d <= tol * scale:
            # a tiny earlier pivot can amplify rounding; trust the spectrum instead
            if d < -1e-6 * scale and np.linalg.eigvalsh(cov)[0] < -1e-10 * scale:
                raise ValueError("covariance is not positive semi-definite")
            continue
        L[j, j] = math.sqrt(d)
        L[j + 1:, j] = (cov[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def _interval_mass(lo, hi):
    """``Phi(hi) - Phi(lo)`` evaluated in the tail that avoids cancellation.

    Returns the mass, the orientation flag and the CDF values at the
    (possibly reflected) interval ends, for reuse by :func:`_truncated_draw`.
    """
    flip = lo > 0
    l = np.where(flip, -hi, lo)
    h = np.where(flip, -lo, hi)
    cl, ch = ndtr(l), ndtr(h)
    de = np.maximum(np.nan_to_num(ch - cl, nan=0.0), 0.0)
    return de, flip, cl, ch


def _truncated_draw(lo, hi, de, flip, cl, ch, w):
    """Inverse-CDF draw from the standard normal restricted to ``[lo, hi]``."""
    u = np.clip(np.where(flip, ch - w * de, cl + w * de), 1e-300, 1.0 - 1e-16)
    z = ndtri(u)
    z = np.where(flip, -z, z)
    # empty intervals carry zero weight; keep the point finite
    fallback = np.where(np.isfinite(lo), lo, np.where(np.isfinite(hi), hi, 0.0))
    return np.where(de > 0, np.clip(z, lo, hi), fallback)


def _sov(a, b, cov, qmc_points, seed, moment):
    """Separation of variables on one (possibly singular) Gaussian rectangle.

    Rows whose Cholesky pivot vanishes are attached to the last column they
    depend on, so each sampled coordinate sees an intersection of intervals
    and the integrand stays continuous in the limits.
    """
    d = a.size
    L = _ordered_cholesky(cov, PIVOT_TOL)
    cols = np.flatnonzero(np.diag(L) > 0)
    tol = 1e-12 * max(1.0, float(np.abs(L).max()))
    owner = np.empty(d, dtype=int)
    for i in range(d):
        sig = cols[(cols <= i) & (np.abs(L[i, cols]) > tol)] if cols.size else cols
        owner[i] = sig[-1] if sig.size else -1
    if np.any(owner < 0):
        raise ValueError("rectangle variable with zero variance reached the sampler")
    m = cols.size - 1
    P = max(int(math.ceil(qmc_points / N_BATCHES)), 16)
    n_pts = N_BATCHES * P
    gens = np.sqrt(_primes(max(m, 1)))[:m]
    k = np.arange(1, P + 1)[:, None]
    # all randomization batches are evaluated together; batch b uses shift seed + b
    shifts = np.array([np.random.default_rng(seed + batch).random(m) for batch in range(N_BATCHES)])
    w = np.abs(2.0 * np.mod(k[None] * gens + shifts[:, None, :], 1.0) - 1.0).reshape(n_pts, m)
    f = np.ones(n_pts)
    z = np.zeros((n_pts, d))
    last_moment = None
    f_before_last = None
    for step, j in enumerate(cols):
        rows = np.flatnonzero(owner == j)
        lo = np.full(n_pts, -np.inf)
        hi = np.full(n_pts, np.inf)
        for i in rows:
            s = z[:, :j] @ L[i, :j]
            c = L[i, j]
            with np.errstate(invalid="ignore"):
                low, up = (a[i] - s) / c, (b[i] - s) / c
            if c < 0:
                low, up = up, low
            lo = np.maximum(lo, low)
            hi = np.minimum(hi, up)
        hi = np.maximum(hi, lo)
        de, flip, cl, ch = _interval_mass(lo, hi)
        if step < m:
            f *= de
            z[:, j] = _truncated_draw(lo, hi, de, flip, cl, ch, w[:, step])
        else:
            f_before_last = f.copy()
            f *= de
            if moment:
                last_moment = _pdf_ext(lo) - _pdf_ext(hi)
    estimates = f.reshape(N_BATCHES, P).mean(axis=1)
    p = float(np.clip(estimates.mean(), 0.0, 1.0))
    err = 3.0 * float(estimates.std(ddof=1)) / math.sqrt(N_BATCHES)
    if not moment:
        return p, err, None
    mom = (f[:, None] * (z @ L.T)).mean(axis=0)
    mom += float((f_before_last * last_moment).mean()) * L[:, cols[-1]]
    return p, err, mom


def _pdf_ext(z):
    out = np.zeros_like(z, dtype=float)
    fin = np.isfinite(z)
    out[fin] = np.exp(-0.5 * z[fin] ** 2) / math.sqrt(2 * math.pi)
    return out


def _rectangle(lower, upper, cov, qmc_points, seed, reorder, moment):
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    a = np.asarray(lower, dtype=float).reshape(-1).copy()
    b = np.asarray(upper, dtype=float).reshape(-1).copy()
    n = cov.shape[0]
    if a.size != n or b.size != n:
        raise ValueError("limits and covariance dimensions differ")
    zero = np.zeros(n)
    if np.any(a > b):
        return 0.0, 0.0, zero
    var = np.diag(cov).copy()
    if np.any(var < -1e-12):
        raise ValueError("covariance is not positive semi-definite")
    sd = np.sqrt(np.maximum(var, 0.0))
    det = sd <= math.sqrt(VAR_TOL)
    if np.any(det & ((a > SIGN_TOL) | (b < -SIGN_TOL))):
        return 0.0, 0.0, zero
    keep = ~det & (np.isfinite(a) | np.isfinite(b))
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return 1.0, 0.0, zero
    a, b, C, sd = a[idx], b[idx], cov[np.ix_(idx, idx)], sd[idx]
    if idx.size == 1:
        za, zb = a[0] / sd[0], b[0] / sd[0]
        p = float(_interval_mass(np.array([za]), np.array([zb]))[0][0])
        mom_k = np.array([sd[0] * float(_pdf_ext(np.array([za]))[0] - _pdf_ext(np.array([zb]))[0])])
        p, err = p, 0.0
    else:
        order = np.argsort(ndtr(b / sd) - ndtr(a / sd), kind="stable") if reorder else np.arange(idx.size)
        p, err, mom_sorted = _sov(a[order], b[order], C[np.ix_(order, order)], qmc_points, seed, moment)
        mom_k = None
        if moment:
            mom_k = np.empty(idx.size)
            mom_k[order] = mom_sorted
    if not moment:
        return p, err, None
    mom = np.zeros(n)
    mom[idx] = mom_k
    # unconstrained coordinates follow by linear regression on the constrained ones
    free = np.flatnonzero(~det & ~keep)
    if free.size:
        mom[free] = cov[np.ix_(free, idx)] @ np.linalg.pinv(C, rcond=1e-10) @ mom_k
    return p, err, mom


def mvn_rectangle(lower, upper, cov, qmc_points=DEFAULT_POINTS, seed=0, reorder=True):
    """Estimate ``P(lower <= Z <= upper)`` for ``Z ~ N(0, cov)``; ``cov`` may be singular.

    Returns
    -------
    prob : float
    err : float
        Three standard errors of the mean over the randomization batches.
    """
    p, err, _ = _rectangle(lower, upper, cov, qmc_points, seed, reorder, False)
    return p, err


def mvn_rectangle_moment(lower, upper, cov, qmc_points=DEFAULT_POINTS, seed=0):
    """``P(A)`` and ``E[Z 1_A]`` for ``A = {lower <= Z <= upper}``, ``Z ~ N(0, cov)``."""
    p, _, mom = _rectangle(lower, upper, cov, qmc_points, seed, True, True)
    return p, mom


def mvn_cdf(upper, spec, qmc_points=DEFAULT_POINTS, seed=0):
    """``P(Z <= upper)`` for ``Z ~ N(0, Sigma)``; returns ``(prob, err)``."""
    upper = np.asarray(upper, dtype=float).reshape(-1)
    return mvn_rectangle(np.full(upper.size, -np.inf), upper, _cov(spec), qmc_points, seed)


@dataclass
class _Standardized:
    lower: np.ndarray
    upper: np.ndarray
    R: np.ndarray
    rep: np.ndarray  # representative row of each variable
    up_row: np.ndarray  # row realizing the upper limit (-1 if none)
    lo_row: np.ndarray  # row realizing the lower limit (-1 if none)
    kept: np.ndarray  # indices of nondegenerate rows
    sigma: np.ndarray  # per kept row
    impossible: bool = False


def _standardize(G, g, cov, strict=False):
    C = G @ cov @ G.T
    var = np.diag(C).copy()
    det = var <= VAR_TOL
    if np.any(det & (g < -SIGN_TOL)):
        return _Standardized(*(np.zeros(0),) * 2, np.zeros((0, 0)), *(np.zeros(0, int),) * 4,
                             np.zeros(0), impossible=True)
    if strict and np.any(~det & (var < NEAR_DEGENERATE)):
        rows = np.flatnonzero(~det & (var < NEAR_DEGENERATE)).tolist()
        raise DegenerateRowError(
            f"rows {rows} have variance below {NEAR_DEGENERATE:g}; drop or rescale them before differentiating")
    kept = np.flatnonzero(~det)
    sig = np.sqrt(var[kept])
    u = g[kept] / sig
    R = C[np.ix_(kept, kept)] / np.outer(sig, sig)
    reps, ups, los, lo_lim, up_lim = [], [], [], [], []
    for pos in range(kept.size):
        for k, r in enumerate(reps):
            c = R[r, pos]
            if c > 1 - _MERGE_TOL:
                if u[pos] < up_lim[k]:
                    up_lim[k], ups[k] = u[pos], pos
                break
            if c < -1 + _MERGE_TOL:
                if -u[pos] > lo_lim[k]:
                    lo_lim[k], los[k] = -u[pos], pos
                break
        else:
            reps.append(pos)
            ups.append(pos)
            los.append(-1)
            up_lim.append(u[pos])
            lo_lim.append(-np.inf)
    reps = np.array(reps, dtype=int)
    return _Standardized(
        lower=np.array(lo_lim), upper=np.array(up_lim), R=R[np.ix_(reps, reps)] if reps.size else np.zeros((0, 0)),
        rep=reps, up_row=np.array(ups, dtype=int), lo_row=np.array(los, dtype=int), kept=kept, sigma=sig,
    )


def _truncation_rows(trunc, dim):
    if trunc is None or trunc.kind == "none":
        return None
    if trunc.kind != "box":
        raise ValueError("rectangle probabilities support box truncation only")
    if trunc.lower.size != dim:
        raise ValueError("truncation box dimension differs from the noise dimension")
    eye = np.eye(dim)
    return np.vstack([eye, -eye]), np.concatenate([trunc.upper, -trunc.lower])


def _as_affine(sys):
    if isinstance(sys, AffineSystem):
        return np.atleast_2d(sys.G), np.asarray(sys.g, dtype=float).reshape(-1)
    G, g = sys
    return np.atleast_2d(np.asarray(G, dtype=float)), np.asarray(g, dtype=float).reshape(-1)


def system_probability(sys, spec, trunc=None, qmc_points=DEFAULT_POINTS, seed=0, return_error=False):
    """``P(G eps <= g)`` for ``eps ~ N(0, Sigma)``, optionally truncated to a box.

    Rows of zero variance are dropped when satisfied and make the probability
    zero otherwise.  Rows that are exact positive or negative multiples of one
    another are merged into a single two-sided limit.
    """
    G, g = _as_affine(sys)
    cov = _cov(spec)
    mass = 1.0
    extra = _truncation_rows(trunc, cov.shape[0])
    if extra is not None:
        G = np.vstack([G, extra[0]]) if G.size else extra[0]
        g = np.concatenate([g, extra[1]])
        mass = truncation_mass(spec, trunc, qmc_points, seed)
    if g.size == 0:
        return (1.0, 0.0) if return_error else 1.0
    st = _standardize(G, g, cov)
    if st.impossible:
        return (0.0, 0.0) if return_error else 0.0
    p, err = mvn_rectangle(st.lower, st.upper, st.R, qmc_points, seed)
    p, err = min(p / mass, 1.0), err / mass
    return (p, err) if return_error else p


def _conditional(R, lo, up, idx, vals):
    """Limits and covariance of the remaining variables given ``Z[idx] = vals``."""
    rest = np.setdiff1d(np.arange(R.shape[0]), idx)
    Rii = R[np.ix_(idx, idx)]
    Rri = R[np.ix_(rest, idx)]
    W = np.linalg.solve(Rii, Rri.T).T
    mean = W @ vals
    cov = R[np.ix_(rest, rest)] - W @ Rri.T
    cov = 0.5 * (cov + cov.T)
    # rounding can leave tiny negative conditional variances
    idx = np.diag_indices_from(cov)
    cov[idx] = np.maximum(cov[idx], 0.0)
    return lo[rest] - mean, up[rest] - mean, cov


def _pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)


def system_probability_gradient(amap: AffineMap, x, spec, trunc=None, qmc_points=DEFAULT_POINTS, seed=0,
                                strict=True, grad_points=None):
    """Value and gradient in ``x`` of ``P(G(x) eps <= g(x))``.

    Each binding row ``i`` contributes its boundary flux
    ``pdf_i(g_i) * E[(dg_i - dG_i eps) 1{other rows hold} | G_i eps = g_i]``.
    The conditional first moment comes from one lattice integral per finite
    limit, so singular row systems need no correlation derivatives.  All
    sub-integrals share ``seed`` (common random numbers).

    With ``strict`` a row whose variance is positive but below ``1e-10``
    raises :class:`DegenerateRowError`.  ``grad_points`` sets the lattice
    size of the conditional sub-integrals (default ``qmc_points``).

    Returns
    -------
    value : float
    grad : ndarray, shape (nx,)
    """
    x = np.asarray(x, dtype=float)
    cov = _cov(spec)
    nx = amap.dG.shape[0]
    G, g = amap.G(x), amap.g(x)
    dG, dg = amap.dG, amap.dg
    mass = 1.0
    extra = _truncation_rows(trunc, cov.shape[0])
    if extra is not None:
        G = np.vstack([G, extra[0]])
        g = np.concatenate([g, extra[1]])
        dG = np.concatenate([dG, np.zeros((nx,) + extra[0].shape)], axis=1)
        dg = np.concatenate([dg, np.zeros((nx, extra[1].size))], axis=1)
        mass = truncation_mass(spec, trunc, qmc_points, seed)
    if g.size == 0:
        return 1.0, np.zeros(nx)
    st = _standardize(G, g, cov, strict=strict)
    if st.impossible:
        return 0.0, np.zeros(nx)
    value, _ = mvn_rectangle(st.lower, st.upper, st.R, qmc_points, seed)
    d = st.upper.size
    if d == 0:
        return min(value / mass, 1.0), np.zeros(nx)
    pts = grad_points or qmc_points
    # covariance of eps with each standardized variable, columns of shape (dim,)
    S = (cov @ G[st.kept[st.rep]].T) / st.sigma[st.rep]
    grad = np.zeros(nx)
    for k in range(d):
        for c, pos in ((st.upper[k], st.up_row[k]), (st.lower[k], st.lo_row[k])):
            if pos < 0 or not np.isfinite(c):
                continue
            row = st.kept[pos]
            if not (np.any(dg[:, row]) or np.any(dG[:, row])):
                continue
            m_eps = S[:, k] * c
            if d == 1:
                p_rest, e_vec = 1.0, m_eps
            else:
                lo, up, C = _conditional(st.R, st.lower, st.upper, [k], np.array([c]))
                p_rest, mom = mvn_rectangle_moment(lo, up, C, pts, seed)
                rest = np.setdiff1d(np.arange(d), [k])
                cross = S[:, rest] - np.outer(S[:, k], st.R[k, rest])
                e_vec = m_eps * p_rest + cross @ (np.linalg.pinv(C, rcond=1e-10, hermitian=True) @ mom)
            grad += _pdf(c) / st.sigma[pos] * (p_rest * dg[:, row] - dG[:, row] @ e_vec)
    return min(value / mass, 1.0), grad / mass


def truncation_mass(spec, trunc, qmc_points=DEFAULT_POINTS, seed=0, mc_points=1_000_000):
    """``P(eps in S)`` for the untruncated Gaussian.

    Boxes go through the rectangle estimator as the stacked rows ``(I, -I)``;
    ellipsoids use plain Monte Carlo with ``mc_points`` draws.
    """
    cov = _cov(spec)
    if trunc is None or trunc.kind == "none":
        return 1.0
    if trunc.kind == "box":
        dim = cov.shape[0]
        eye = np.eye(dim)
        st = _standardize(np.vstack([eye, -eye]), np.concatenate([trunc.upper, -trunc.lower]), cov)
        if st.impossible:
            return 0.0
        p, _ = mvn_rectangle(st.lower, st.upper, st.R, qmc_points, seed)
        return p
    eps = sample_noise(spec, mc_points, seed)
    return float(np.mean(trunc.contains(eps)))


def truncated_scalar_mean(m, sigma, a, b):
    """Mean of ``N(m, sigma^2)`` conditioned on ``[a, b]``."""
    if not a < b:
        raise ValueError("need a < b")
    if sigma <= 0:
        raise ValueError("need sigma > 0")
    za, zb = (a - m) / sigma, (b - m) / sigma
    # evaluate in the tail that keeps the mass difference accurate
    if za > 0:
        mass = ndtr(-za) - ndtr(-zb)
    else:
        mass = ndtr(zb) - ndtr(za)
    if not mass > 1e-300:
        raise ValueError("interval has vanishing probability mass")
    pa = _pdf(za) if np.isfinite(za) else 0.0
    pb = _pdf(zb) if np.isfinite(zb) else 0.0
    return float(m + sigma * (pa - pb) / mass)


def sample_noise(spec, n, seed=0, trunc=None, max_rounds=1000):
    """Draw ``n`` samples of the (optionally truncated) noise, by rejection when truncated."""
    from .timeseries import psd_factor

    cov = _cov(spec)
    L = psd_factor(cov)
    rng = np.random.default_rng(seed)
    if trunc is None or trunc.kind == "none":
        return rng.standard_normal((n, cov.shape[0])) @ L.T
    if trunc.kind == "box" and np.allclose(cov, np.diag(np.diag(cov))):
        from scipy.stats import truncnorm

        sd = np.sqrt(np.diag(cov))
        out = np.zeros((n, cov.shape[0]))
        pos = sd > 0
        lo, hi = trunc.lower[pos] / sd[pos], trunc.upper[pos] / sd[pos]
        out[:, pos] = truncnorm.rvs(lo, hi, size=(n, int(pos.sum())), random_state=rng) * sd[pos]
        return out
    chunks, have = [], 0
    for _ in range(max_rounds):
        block = rng.standard_normal((max(n, 1024), cov.shape[0])) @ L.T
        block = block[trunc.contains(block)]
        chunks.append(block)
        have += block.shape[0]
        if have >= n:
            return np.vstack(chunks)[:n]
    raise ValueError("truncation region has too little mass for rejection sampling")
