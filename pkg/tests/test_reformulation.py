import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from dynchance.reformulation import (
    HARD,
    PROB,
    SOFT,
    LinearDecisionRule,
    affine_map,
    box_bounds,
    clip_mean_partials,
    hard_polyhedral,
    objective_gradient,
    objective_value,
    scalar_clip_mean,
    static_reduction_test,
)


def _direct_rows(stage, grp, rule, xi):
    """Group rows evaluated straight from the stage data along scenarios ``xi``."""
    g = stage.group(grp)
    y = rule.evaluate(xi)
    out = []
    for t in range(stage.T):
        lhs = -g.b[t][None, :].repeat(xi.shape[0], 0)
        for tau in range(t + 1):
            lhs = lhs + y[tau] @ g.A[t][tau].T + xi[:, tau] @ g.B[t][tau].T
        out.append(lhs)
    return np.concatenate(out, axis=1)


@pytest.mark.parametrize("grp", [SOFT, PROB, HARD])
def test_affine_map_matches_direct_evaluation(reservoir, rng, grp):
    stage, cf, _ = reservoir
    amap = affine_map(stage, grp, cf)
    x = rng.normal(size=amap.dG.shape[0])
    eps = rng.standard_normal((50, cf.Sigma.shape[0]))
    rule = LinearDecisionRule.from_vector(x, stage.n, stage.M)
    lhs = eps @ amap.G(x).T - amap.g(x)
    np.testing.assert_allclose(lhs, _direct_rows(stage, grp, rule, cf.xi_from_eps(eps)), atol=1e-12)


def test_affine_map_is_affine(reservoir, rng):
    stage, cf, _ = reservoir
    amap = affine_map(stage, PROB, cf)
    x1, x2 = rng.normal(size=(2, amap.dG.shape[0]))
    zero = np.zeros_like(x1)
    assert np.abs(amap.G(x1 + x2) - amap.G(x1) - amap.G(x2) + amap.G(zero)).max() < 1e-13
    assert np.abs(amap.g(x1 + x2) - amap.g(x1) - amap.g(x2) + amap.g(zero)).max() < 1e-13


@settings(max_examples=30, deadline=None)
@given(n=st.lists(st.integers(0, 3), min_size=1, max_size=4), M=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_rule_vector_round_trip(n, M, seed):
    x = np.random.default_rng(seed).normal(size=LinearDecisionRule.size(n, M))
    rule = LinearDecisionRule.from_vector(x, n, M)
    np.testing.assert_array_equal(rule.to_vector(), x)
    assert rule.F[0].shape == (n[0], 0)


def test_objective_gradient_central_differences(reservoir, rng):
    stage, cf, _ = reservoir
    nx = LinearDecisionRule.size(stage.n, stage.M)
    for _ in range(5):
        x = rng.normal(size=nx)
        grad = objective_gradient(stage, cf, x)
        h = 1e-6
        fd = np.array([(objective_value(stage, cf, x + h * e) - objective_value(stage, cf, x - h * e)) / (2 * h)
                       for e in np.eye(nx)])
        assert np.linalg.norm(grad - fd) / np.linalg.norm(fd) <= 1e-6


def test_objective_matches_sampling(reservoir, rng):
    stage, cf, _ = reservoir
    x = rng.normal(size=LinearDecisionRule.size(stage.n, stage.M))
    rule = LinearDecisionRule.from_vector(x, stage.n, stage.M)
    eps = rng.standard_normal((400_000, cf.Sigma.shape[0]))
    xi = cf.xi_from_eps(eps)
    y = rule.evaluate(xi)
    soft = _direct_rows(stage, SOFT, rule, xi)
    cost = sum(y[t] @ stage.h[t] for t in range(stage.T)) + np.maximum(soft, 0.0) @ np.concatenate(stage.penalty)
    assert abs(cost.mean() - objective_value(stage, cf, x)) < 4 * cost.std() / np.sqrt(cost.size)


def test_clip_mean_against_quadrature(rng):
    for _ in range(30):
        m, s = rng.normal(), rng.uniform(0.1, 3.0)
        a = m + rng.uniform(-3, 1) * s
        b = a + rng.uniform(0.05, 4) * s
        pdf = norm(m, s).pdf
        ref = a * norm.cdf(a, m, s) + b * norm.sf(b, m, s) + quad(lambda v: v * pdf(v), a, b, epsabs=1e-13)[0]
        assert abs(scalar_clip_mean(a, b, m, s) - ref) <= 1e-8


def test_clip_mean_limits_and_partials():
    assert scalar_clip_mean(-np.inf, np.inf, 0.7, 2.0) == pytest.approx(0.7, abs=1e-15)
    assert scalar_clip_mean(0.0, 1.0, 3.0, 0.0) == 1.0
    m, s, h = 0.2, 0.8, 1e-6
    dm, ds = clip_mean_partials(-0.5, 1.0, m, s)
    assert dm == pytest.approx((scalar_clip_mean(-0.5, 1, m + h, s) - scalar_clip_mean(-0.5, 1, m - h, s)) / (2 * h), abs=1e-8)
    assert ds == pytest.approx((scalar_clip_mean(-0.5, 1, m, s + h) - scalar_clip_mean(-0.5, 1, m, s - h)) / (2 * h), abs=1e-8)
    with pytest.raises(ValueError):
        scalar_clip_mean(1.0, 0.0, 0.0, 1.0)


def test_hard_polyhedral_forces_static_rules(reservoir):
    stage, cf, _ = reservoir
    lin = hard_polyhedral(stage, cf)
    static = LinearDecisionRule.static([[1.0], [2.0], [0.5]], 1).to_vector()
    assert lin.satisfied(static)
    adaptive = static.copy()
    adaptive[1] = 0.1
    assert not lin.satisfied(adaptive)


def test_static_reduction_detected(reservoir):
    stage, cf, _ = reservoir
    ok, detail = static_reduction_test(cf, stage)
    assert ok and all(d["surjective"] for d in detail)


def test_box_bounds(reservoir):
    stage, _, _ = reservoir
    lo, hi = box_bounds(stage)
    assert [v.tolist() for v in lo] == [[0.0]] * 3
    assert [v.tolist() for v in hi] == [[3.0]] * 3
    assert not any(np.signbit(v).any() for v in lo)
