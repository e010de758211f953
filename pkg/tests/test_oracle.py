import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynchance.gaussian import GaussianSpec, mvn_cdf
from dynchance.oracle import (
    EXAMPLE_LEVEL,
    example1_values,
    in_S,
    in_S_tilde,
    psi,
    psi_tilde,
    saa_probability,
    sample_example1,
)


def test_example_values():
    vals = example1_values()
    np.testing.assert_allclose(vals, (0.0, 1.0, 2 / 3, 2 / 3, 0.5), atol=1e-3)


def test_known_points():
    assert psi(2 / 3, 1.5) == pytest.approx(1 / 3, abs=1e-15)
    assert psi_tilde(0.5, -1.0) == pytest.approx(1 / 3, abs=1e-15)
    assert psi(1.0, 0.0) == pytest.approx(1 / 3, abs=1e-15)
    assert psi(0.4, -1.0) == pytest.approx(1 / 6, abs=1e-15)


@pytest.mark.parametrize("f", [psi, psi_tilde])
def test_continuity_at_case_boundaries(f):
    h = 1e-13
    for y1 in (0.0, 0.3, 0.9, 1.0):
        assert abs(f(y1, h) - f(y1, 0.0)) <= 1e-12
        assert abs(f(y1, 1 + h) - f(y1, 1.0)) <= 1e-12
    for a in (1.5, 2.0, 3.0):
        y = 1 / a
        assert abs(f(y + h, a) - f(y - h, a)) <= 1e-12


def test_psi_tilde_is_continuous_at_zero_from_below():
    for y1 in (0.0, 0.5, 1.0):
        assert abs(psi_tilde(y1, -1e-13) - psi_tilde(y1, 0.0)) <= 1e-12


def test_closed_forms_against_sampling():
    rng = np.random.default_rng(11)
    worst = 0.0
    for k in range(100):
        y1, a = rng.uniform(0, 1), rng.uniform(-1, 3)
        for f, event in ((psi, in_S), (psi_tilde, in_S_tilde)):
            est, sd = saa_probability(lambda xi: event(xi, a, y1), sample_example1, 20_000, seed=k)
            worst = max(worst, abs(est - f(y1, a)) / max(sd, 1e-4))
    assert worst <= 4.5


def test_clipping_only_adds_probability():
    y1, a = np.meshgrid(np.linspace(0, 1, 41), np.linspace(-1, 3, 81))
    assert np.all(psi_tilde(y1, a) >= psi(y1, a) - 1e-15)


def test_values_monotone_in_level():
    prev = None
    for p in (0.1, 0.2, 0.3, EXAMPLE_LEVEL):
        vals = example1_values(p, resolution=200)
        if prev is not None:
            assert all(v >= w - 1e-9 for v, w in zip(vals[1:], prev[1:]))
        prev = vals
    assert example1_values(0.5, resolution=200)[1] == float("inf")


def test_domain_is_enforced():
    with pytest.raises(ValueError):
        psi(1.5, 0.0)
    with pytest.raises(ValueError):
        psi_tilde(0.5, -2.0)


def test_sampler_stays_on_support():
    xi = sample_example1(100_000, 0)
    upper = (xi[:, 1] >= 0) & (xi[:, 0] >= -1)
    lower = (xi[:, 1] <= 0) & (xi[:, 0] >= 0)
    assert np.all((upper | lower) & (np.abs(xi) <= 1).all(axis=1))
    # the upper rectangle carries two thirds of the mass
    assert abs(np.mean(xi[:, 1] > 0) - 2 / 3) <= 4 * np.sqrt(2 / 9 / 1e5)


def _gauss(cov):
    root = np.linalg.cholesky(cov)
    return lambda m, rng: rng.standard_normal((m, cov.shape[0])) @ root.T


def test_saa_degenerate_events():
    est, sd = saa_probability(lambda x: np.ones(x.shape[0], bool), _gauss(np.eye(2)), 10_000)
    assert est == 1.0 and sd == 0.0
    est, sd = saa_probability(lambda x: x[:, 0] + x[:, 1] <= 0, _gauss(np.eye(2)), 200_000, seed=4)
    assert abs(est - 0.5) <= 4 * sd
    with pytest.raises(ValueError):
        saa_probability(lambda x: x, _gauss(np.eye(1)), 0)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_saa_agrees_with_lattice_cdf(seed):
    rng = np.random.default_rng(seed)
    root = rng.normal(size=(3, 3))
    cov = root @ root.T + 0.3 * np.eye(3)
    upper = rng.normal(size=3)
    p, _ = mvn_cdf(upper, GaussianSpec(cov), qmc_points=50_000, seed=seed)
    est, sd = saa_probability(lambda x: np.all(x <= upper, axis=1), _gauss(cov), 200_000, seed=seed)
    assert abs(est - p) <= 4 * sd + 1e-4
