"""Self-checks exposed by ``dynchance verify <suite>``.

Each suite returns ``{"suite", "passed", "checks": [{"name", "passed", "detail"}]}``.
"""

from __future__ import annotations

import time

import numpy as np
from scipy.integrate import quad
from scipy.stats import norm

from .gaussian import GaussianSpec, mvn_cdf, truncated_scalar_mean
from .instances import reservoir_model, reservoir_stages
from .oracle import example1_values, psi, psi_tilde
from .problems import build_problem, value_chain_check
from .projection import project_box, project_scenarios
from .reformulation import LinearDecisionRule, box_bounds, scalar_clip_mean
from .solver import SolverOptions
from .timeseries import TimeSeriesModel, compact_form, decompose_coefficients, simulate_paths

__all__ = ["SUITES", "run_suite", "random_model"]


def _check(name, ok, detail):
    return {"name": name, "passed": bool(ok), "detail": detail}


def random_model(rng, T=8, M=3, max_lag=3):
    """Random stage-dependent model with lags up to ``max_lag`` and enough history."""
    alpha, beta = [], []
    for _ in range(T):
        arow, brow = [], []
        for _ in range(M):
            p, q = rng.integers(0, max_lag + 1, size=2)
            a = np.concatenate([[rng.uniform(0.5, 1.5)], rng.uniform(-0.4, 0.4, p)])
            b = np.concatenate([[1.0], rng.uniform(-0.5, 0.5, q)])
            for v in (a, b):
                if v.size > 1 and abs(v[-1]) < 1e-3:
                    v[-1] = 0.1
            arow.append(a)
            brow.append(b)
        alpha.append(arow)
        beta.append(brow)
    root = rng.normal(size=(T, M, M))
    sigma = np.einsum("tij,tkj->tik", root, root) + 0.1 * np.eye(M)
    return TimeSeriesModel(alpha, beta, rng.normal(size=(T, M)), sigma,
                           xi_hist=rng.normal(size=(M, max_lag)), eps_hist=rng.normal(size=(M, max_lag)))


def suite_example1(seed=0):
    t0 = time.perf_counter()
    vals = example1_values()
    target = (0.0, 1.0, 2 / 3, 2 / 3, 0.5)
    err = max(abs(v - t) for v, t in zip(vals, target))
    return [
        _check("optimal values", err <= 1e-3, f"{[round(v, 6) for v in vals]} vs (0, 1, 2/3, 2/3, 1/2)"),
        _check("psi(2/3, 3/2) = 1/3", abs(psi(2 / 3, 1.5) - 1 / 3) < 1e-12, f"{psi(2 / 3, 1.5):.15f}"),
        _check("psi_tilde(1/2, -1) = 1/3", abs(psi_tilde(0.5, -1.0) - 1 / 3) < 1e-12, f"{psi_tilde(0.5, -1.0):.15f}"),
        _check("runtime", time.perf_counter() - t0 < 60, f"{time.perf_counter() - t0:.2f} s"),
    ]


def suite_decomposition(seed=0, models=50, paths=100):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(models):
        model = random_model(rng, T=8, M=int(rng.integers(1, 4)))
        cf = compact_form(decompose_coefficients(model), model)
        xi, eps = simulate_paths(model, paths, seed=seed + 1000 * k)
        worst = max(worst, float(np.abs(xi - cf.xi_from_eps(eps.reshape(paths, -1))).max()))
    return [_check("max |xi - (mu_tilde + Theta eps)|", worst <= 1e-10, f"{worst:.2e} over {models} models")]


def suite_gaussian(seed=0):
    R = np.full((3, 3), 0.5)
    np.fill_diagonal(R, 1.0)
    p, _ = mvn_cdf(np.zeros(3), R, qmc_points=100_000, seed=seed)
    rng = np.random.default_rng(seed)
    clip_err = trunc_err = 0.0
    for _ in range(20):
        m, s = rng.normal(), rng.uniform(0.2, 2.0)
        a = m + rng.uniform(-2.5, 0.5) * s
        b = a + rng.uniform(0.1, 3.0) * s
        pdf = norm(m, s).pdf
        ref = a * norm.cdf(a, m, s) + b * norm.sf(b, m, s) + quad(lambda x: x * pdf(x), a, b, epsabs=1e-13)[0]
        clip_err = max(clip_err, abs(float(scalar_clip_mean(a, b, m, s)) - ref))
        mass = quad(pdf, a, b, epsabs=1e-14)[0]
        tref = quad(lambda x: x * pdf(x), a, b, epsabs=1e-14)[0] / mass
        trunc_err = max(trunc_err, abs(truncated_scalar_mean(m, s, a, b) - tref))
    return [
        _check("equicorrelated orthant", abs(p - 0.25) <= 1e-4, f"{p:.6f} at 1e5 points"),
        _check("clip mean vs quadrature", clip_err <= 1e-8, f"{clip_err:.1e}"),
        _check("truncated mean vs quadrature", trunc_err <= 1e-8, f"{trunc_err:.1e}"),
    ]


def suite_projection(seed=0, scenarios=10_000):
    stage = reservoir_stages()
    model = reservoir_model()
    cf = compact_form(decompose_coefficients(model), model)
    rng = np.random.default_rng(seed)
    rule = LinearDecisionRule.from_vector(rng.normal(size=LinearDecisionRule.size(stage.n, stage.M)), stage.n, stage.M)
    eps = rng.standard_normal((scenarios, cf.Sigma.shape[0]))
    xi = cf.xi_from_eps(eps)
    bounds = box_bounds(stage)
    clip = project_box(rule, xi, bounds)
    qp = project_scenarios(rule, xi, stage)
    agree = max(float(np.abs(c - q).max()) for c, q in zip(clip, qp))
    # projecting an already projected decision must not move it
    again = [np.clip(c, lo, hi) for c, lo, hi in zip(clip, *bounds)]
    idem = max(float(np.abs(c - a).max()) for c, a in zip(clip, again))
    return [
        _check("clip and QP agree", agree <= 1e-9, f"{agree:.1e} over {scenarios} scenarios"),
        _check("idempotence", idem <= 1e-9, f"{idem:.1e}"),
    ]


def suite_chain(seed=0, saa_n=1_000_000):
    t0 = time.perf_counter()
    model, stage = reservoir_model(), reservoir_stages()
    cf = compact_form(decompose_coefficients(model), model)
    spec = GaussianSpec(cf.Sigma)
    reports, insts = {}, {}
    warm = {"P3": ["P1", "P2"], "P4": ["P3"]}
    for kind in ("P1", "P2", "P3", "P4"):
        inst = build_problem(kind, stage, cf, spec, seed=seed)
        starts = [reports[k].x for k in warm.get(kind, [])]
        reports[kind] = inst.solve(SolverOptions(starts=3, seed=seed), warm_starts=starts)
        insts[kind] = inst
    verdict = value_chain_check(reports, instances=insts, saa_n=saa_n)
    out = [_check(name, ok, detail) for name, ok, detail in verdict.checks]
    elapsed = time.perf_counter() - t0
    out.append(_check("runtime", elapsed < 600, f"{elapsed:.1f} s"))
    for kind, rep in reports.items():
        out.append({"name": f"{kind} solver status", "passed": True, "informational": True,
                    "detail": f"{rep.message}; objective {rep.objective:.6f}"})
    return out


SUITES = {
    "example1": suite_example1,
    "decomposition": suite_decomposition,
    "gaussian": suite_gaussian,
    "projection": suite_projection,
    "chain": suite_chain,
}


def run_suite(name, seed=0):
    checks = SUITES[name](seed=seed)
    return {"suite": name, "seed": seed, "passed": all(c["passed"] for c in checks), "checks": checks}
