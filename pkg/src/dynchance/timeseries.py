"""Generalized linear time-series model and its causal decomposition.

Each component ``m`` of the process obeys, for stages ``t = 1..T``::

    sum_{k=0}^{p_t(m)} alpha[t][m][k] xi_{t-k}(m)
        = mu[t][m] + sum_{k=0}^{q_t(m)} beta[t][m][k] eps_{t-k}(m)

with ``eps_t ~ N(0, Sigma_t)`` independent across stages.  Unrolling the
recursion expresses ``xi_t`` as a constant (depending on pre-horizon history)
plus a lower block-triangular combination of the in-horizon noises, which is
what the optimization layer consumes.

Indexing conventions: stages are 0-based in arrays (``alpha[0]`` is stage 1).
History arrays are ordered backwards in time, ``xi_hist[m, k-1]`` holding
``xi_{1-k}(m)``, so column 0 is the observation at instant 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "TimeSeriesModel",
    "Decomposition",
    "CompactForm",
    "ModelError",
    "decompose_coefficients",
    "compact_form",
    "simulate_paths",
    "psd_factor",
]

PIVOT_TOL = 1e-12


class ModelError(ValueError):
    """Raised for invalid model data (zero leading coefficient, short history, ...)."""


def psd_factor(cov, tol=PIVOT_TOL):
    """Pivoted Cholesky factor ``L`` with ``L @ L.T == cov`` for PSD ``cov``.

    Pivots below ``tol`` are treated as zero, which admits semi-definite
    matrices.  A negative pivot below ``-tol`` raises :class:`ModelError`.
    """
    a = np.array(cov, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ModelError("covariance must be a square matrix")
    if not np.allclose(a, a.T, atol=1e-12, rtol=1e-10):
        raise ModelError("covariance is not symmetric")
    n = a.shape[0]
    perm = np.arange(n)
    L = np.zeros((n, n))
    for j in range(n):
        diag = np.diag(a)[j:] - np.sum(L[j:, :j] ** 2, axis=1)
        piv = j + int(np.argmax(diag))
        dmax = diag[piv - j]
        if dmax < -tol:
            raise ModelError(f"covariance is not positive semi-definite (pivot {dmax:.3e})")
        if dmax <= tol:
            # remaining Schur complement is numerically zero
            if np.min(diag) < -tol:
                raise ModelError("covariance is not positive semi-definite")
            break
        if piv != j:
            a[[j, piv], :] = a[[piv, j], :]
            a[:, [j, piv]] = a[:, [piv, j]]
            L[[j, piv], :j] = L[[piv, j], :j]
            perm[[j, piv]] = perm[[piv, j]]
        L[j, j] = np.sqrt(dmax)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    out = np.zeros((n, n))
    out[perm] = L
    return out


@dataclass
class TimeSeriesModel:
    """Parameters of the stage-dependent linear model.

    Parameters
    ----------
    alpha, beta : list (over stages) of list (over components) of 1-D arrays
        ``alpha[t][m]`` has length ``p_t(m) + 1``, ``beta[t][m]`` length
        ``q_t(m) + 1``.
    mu : array, shape (T, M)
        Tendencies.
    sigma : array, shape (T, M, M)
        Noise covariance per stage.
    xi_hist, eps_hist : array, shape (M, K)
        Pre-horizon observations, newest first.
    """

    alpha: list
    beta: list
    mu: np.ndarray
    sigma: np.ndarray
    xi_hist: np.ndarray = field(default=None)
    eps_hist: np.ndarray = field(default=None)

    def __post_init__(self):
        self.alpha = [[np.atleast_1d(np.asarray(a, dtype=float)) for a in row] for row in self.alpha]
        self.beta = [[np.atleast_1d(np.asarray(b, dtype=float)) for b in row] for row in self.beta]
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        T, M = self.mu.shape if self.mu.ndim == 2 else (None, None)
        if T is None or T < 1:
            raise ModelError("mu must have shape (T, M)")
        if len(self.alpha) != T or len(self.beta) != T:
            raise ModelError("alpha/beta must have one entry per stage")
        if self.sigma.shape != (T, M, M):
            raise ModelError(f"sigma must have shape ({T}, {M}, {M}), got {self.sigma.shape}")
        for t in range(T):
            if len(self.alpha[t]) != M or len(self.beta[t]) != M:
                raise ModelError(f"stage {t + 1}: expected {M} components")
            for m in range(M):
                a, b = self.alpha[t][m], self.beta[t][m]
                if a.size == 0 or b.size == 0:
                    raise ModelError(f"stage {t + 1}, component {m + 1}: empty coefficients")
                if a[0] == 0.0:
                    raise ModelError(f"stage {t + 1}, component {m + 1}: alpha_0 is zero")
                if a[-1] == 0.0:
                    raise ModelError(f"stage {t + 1}, component {m + 1}: alpha_p is zero")
                if b[-1] == 0.0:
                    raise ModelError(f"stage {t + 1}, component {m + 1}: beta_q is zero")
        for t in range(T):
            s = self.sigma[t]
            if not np.allclose(s, s.T, atol=1e-12):
                raise ModelError(f"stage {t + 1}: sigma is not symmetric")
            if np.linalg.eigvalsh(s).min() < -1e-12:
                raise ModelError(f"stage {t + 1}: sigma is not positive semi-definite")
        self.xi_hist = self._hist(self.xi_hist, M)
        self.eps_hist = self._hist(self.eps_hist, M)

    @staticmethod
    def _hist(h, M):
        if h is None:
            return np.zeros((M, 0))
        h = np.asarray(h, dtype=float)
        if h.ndim == 1:
            h = h.reshape(M, -1)
        if h.shape[0] != M:
            raise ModelError("history must have one row per component")
        return h

    @property
    def T(self):
        return self.mu.shape[0]

    @property
    def M(self):
        return self.mu.shape[1]

    def p(self, t, m):
        return self.alpha[t][m].size - 1

    def q(self, t, m):
        return self.beta[t][m].size - 1

    @classmethod
    def ar1(cls, T, phi, sigma=1.0, mu=0.0, xi0=0.0):
        """Scalar AR(1) ``xi_t = phi xi_{t-1} + mu + eps_t`` (handy for tests and demos)."""
        return cls(
            alpha=[[[1.0, -phi]] for _ in range(T)],
            beta=[[[1.0]] for _ in range(T)],
            mu=np.full((T, 1), mu),
            sigma=np.full((T, 1, 1), sigma ** 2),
            xi_hist=[[xi0]],
        )


@dataclass
class Decomposition:
    """Coefficients of ``xi_t(m) = c + sum gamma xi_{1-k} + sum delta eps_{1-k} + sum theta eps_k``.

    ``gamma[t][m]``, ``delta[t][m]`` and ``theta[t][m]`` are 1-D arrays with
    ``gamma[t][m][k-1]`` multiplying ``xi_{1-k}(m)`` and ``theta[t][m][k-1]``
    multiplying ``eps_k(m)`` (length ``t + 1`` for 0-based ``t``).
    """

    c: np.ndarray
    gamma: list
    delta: list
    theta: list

    @property
    def r(self):
        return np.array([[g.size for g in row] for row in self.gamma], dtype=int)

    @property
    def s(self):
        return np.array([[d.size for d in row] for row in self.delta], dtype=int)


@dataclass
class CompactForm:
    """``xi_t = mu_tilde[t] + Theta[t] @ eps`` with ``eps ~ N(0, Sigma)`` stacked over stages."""

    mu_tilde: np.ndarray  # (T, M)
    Theta: np.ndarray  # (T, M, M*T)
    Sigma: np.ndarray  # (M*T, M*T)

    @property
    def T(self):
        return self.mu_tilde.shape[0]

    @property
    def M(self):
        return self.mu_tilde.shape[1]

    def theta_stack(self, t):
        """Rows of ``Theta_1 .. Theta_t`` stacked, shape ``(M*t, M*T)``; ``t`` counts stages."""
        return self.Theta[:t].reshape(self.M * t, self.M * self.T)

    def mu_stack(self, t):
        return self.mu_tilde[:t].reshape(-1)

    def xi_from_eps(self, eps):
        """Map noise draws ``(..., M*T)`` to process values ``(..., T, M)``."""
        eps = np.asarray(eps, dtype=float)
        xi = np.einsum("tmk,...k->...tm", self.Theta, eps)
        return xi + self.mu_tilde


def decompose_coefficients(model: TimeSeriesModel) -> Decomposition:
    """Unroll the model recursion into causal coefficients (stage by stage)."""
    T, M = model.T, model.M
    c = np.zeros((T, M))
    gamma = [[None] * M for _ in range(T)]
    delta = [[None] * M for _ in range(T)]
    theta = [[None] * M for _ in range(T)]

    for m in range(M):
        a0 = model.alpha[0][m][0]
        c[0, m] = model.mu[0, m] / a0
        gamma[0][m] = -model.alpha[0][m][1:] / a0
        delta[0][m] = model.beta[0][m][1:] / a0
        theta[0][m] = np.array([model.beta[0][m][0] / a0])

        # stage u (0-based) depends on the u stages already decomposed
        for u in range(1, T):
            t = u  # number of stages already decomposed
            alpha = model.alpha[u][m]
            beta = model.beta[u][m]
            a0 = alpha[0]
            p, q = alpha.size - 1, beta.size - 1
            kmax = min(t, p)
            # earlier decompositions are for stages t+1-k, i.e. 0-based index u-k
            prev = range(1, kmax + 1)

            c[u, m] = model.mu[u, m] / a0 - sum(alpha[k] / a0 * c[u - k, m] for k in prev)

            th = np.zeros(t + 1)
            th[t] = beta[0] / a0
            qmin = min(t, q)
            for j in range(1, t + 1):
                acc = -sum(
                    alpha[k] / a0 * theta[u - k][m][j - 1]
                    for k in range(1, min(p, t + 1 - j) + 1)
                )
                if j >= t + 1 - qmin:
                    acc += beta[t + 1 - j] / a0
                th[j - 1] = acc
            theta[u][m] = th

            r_prev = [gamma[u - k][m].size for k in prev]
            s_prev = [delta[u - k][m].size for k in prev]
            X = max(r_prev, default=0)
            Y = max(s_prev, default=0)
            gamma[u][m] = _history_coefficients(alpha, a0, -alpha, p, t, X, gamma, u, m, prev)
            delta[u][m] = _history_coefficients(alpha, a0, beta, q, t, Y, delta, u, m, prev)
    return Decomposition(c=c, gamma=gamma, delta=delta, theta=theta)


def _history_coefficients(alpha, a0, direct, lag, t, X, table, u, m, prev):
    """Coefficients on pre-horizon values for the stage being decomposed.

    ``direct`` holds the coefficients by which the model itself references
    pre-horizon values (``-alpha`` for the process, ``beta`` for the noise),
    ``X`` is the maximal history depth among the referenced earlier stages.
    """
    size = max(lag - t, X)
    out = np.zeros(max(size, 0))
    for j in range(1, size + 1):
        val = 0.0
        if j <= lag - t:
            val += direct[t + j] / a0
        if j <= X:
            val -= sum(alpha[k] / a0 * table[u - k][m][j - 1]
                       for k in prev if j <= table[u - k][m].size)
        out[j - 1] = val
    return out


def _required_history(dec: Decomposition):
    r = dec.r.max(axis=0) if dec.r.size else np.zeros(0, int)
    s = dec.s.max(axis=0) if dec.s.size else np.zeros(0, int)
    return r, s


def compact_form(dec: Decomposition, model: TimeSeriesModel) -> CompactForm:
    """Assemble ``mu_tilde``, the ``Theta_t`` matrices and the stacked covariance."""
    T, M = model.T, model.M
    r_need, s_need = _required_history(dec)
    for m in range(M):
        if model.xi_hist.shape[1] < r_need[m]:
            raise ModelError(
                f"component {m + 1}: xi history has {model.xi_hist.shape[1]} values, "
                f"decomposition needs {r_need[m]}"
            )
        if model.eps_hist.shape[1] < s_need[m]:
            raise ModelError(
                f"component {m + 1}: eps history has {model.eps_hist.shape[1]} values, "
                f"decomposition needs {s_need[m]}"
            )
    mu_tilde = np.array(dec.c, dtype=float)
    Theta = np.zeros((T, M, M * T))
    for t in range(T):
        for m in range(M):
            g, d = dec.gamma[t][m], dec.delta[t][m]
            mu_tilde[t, m] += g @ model.xi_hist[m, :g.size] + d @ model.eps_hist[m, :d.size]
            Theta[t, m, m:M * (t + 1):M] = dec.theta[t][m]
    Sigma = np.zeros((M * T, M * T))
    for t in range(T):
        Sigma[M * t:M * (t + 1), M * t:M * (t + 1)] = model.sigma[t]
    return CompactForm(mu_tilde=mu_tilde, Theta=Theta, Sigma=Sigma)


def simulate_paths(model: TimeSeriesModel, n_paths: int, seed: int = 0):
    """Simulate by iterating the model recursion directly.

    Path ``i`` draws its noise from a generator seeded with ``seed + i``, so a
    path does not depend on how many others are generated alongside it.

    Returns
    -------
    xi, eps : arrays of shape ``(n_paths, T, M)``
    """
    T, M = model.T, model.M
    factors = [psd_factor(model.sigma[t]) for t in range(T)]
    z = np.empty((n_paths, T, M))
    for i in range(n_paths):
        z[i] = np.random.default_rng(seed + i).standard_normal((T, M))
    eps = np.einsum("tab,ntb->nta", np.array(factors), z)
    xi = np.zeros((n_paths, T, M))

    def past(arr, hist, m, idx):
        # idx is 0-based stage; negative idx reaches into history
        if idx >= 0:
            return arr[:, idx, m]
        k = -idx  # instant 1-k  <->  0-based stage -k
        if k > hist.shape[1]:
            raise ModelError(f"component {m + 1}: history too short for lag reaching instant {1 - k}")
        return np.full(n_paths, hist[m, k - 1])

    for t in range(T):
        for m in range(M):
            alpha, beta = model.alpha[t][m], model.beta[t][m]
            rhs = np.full(n_paths, model.mu[t, m])
            for k, b in enumerate(beta):
                rhs = rhs + b * past(eps, model.eps_hist, m, t - k)
            for k in range(1, alpha.size):
                rhs = rhs - alpha[k] * past(xi, model.xi_hist, m, t - k)
            xi[:, t, m] = rhs / alpha[0]
    return xi, eps
