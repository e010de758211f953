import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynchance.io import load_model
from dynchance.suites import random_model
from dynchance.timeseries import (
    ModelError,
    TimeSeriesModel,
    compact_form,
    decompose_coefficients,
    psd_factor,
    simulate_paths,
)


def _unrolled_ar1(T, phi, mu, xi0):
    """Theta and mu_tilde of a scalar AR(1) written out by hand."""
    theta = np.array([[phi ** (t - k) if k <= t else 0.0 for k in range(T)] for t in range(T)])
    mean = np.array([phi ** (t + 1) * xi0 + mu * sum(phi ** j for j in range(t + 1)) for t in range(T)])
    return theta, mean


def test_ar1_theta_is_powers_of_phi(data_dir):
    model = load_model(data_dir / "ar1_model.json")
    cf = compact_form(decompose_coefficients(model), model)
    theta, mean = _unrolled_ar1(3, 0.5, 1.0, 2.0)
    np.testing.assert_allclose(cf.Theta[:, 0, :], theta, atol=1e-15)
    np.testing.assert_allclose(cf.mu_tilde[:, 0], mean, atol=1e-15)


def test_pure_noise_gives_identity_blocks(data_dir):
    model = load_model(data_dir / "pure_noise_model.json")
    cf = compact_form(decompose_coefficients(model), model)
    for t in range(model.T):
        block = cf.Theta[t]
        np.testing.assert_array_equal(block[:, 2 * t:2 * t + 2], np.eye(2))
        assert np.count_nonzero(block) == 2
    np.testing.assert_array_equal(cf.mu_tilde, 0.0)


def test_ma1_coefficients(data_dir):
    model = load_model(data_dir / "ma1_model.json")
    dec = decompose_coefficients(model)
    assert dec.theta[0][0].tolist() == [1.0]
    assert dec.delta[0][0].tolist() == [0.3]
    np.testing.assert_allclose(dec.theta[1][0], [0.3, 1.0])
    cf = compact_form(dec, model)
    # the pre-horizon noise 0.5 enters only the first stage
    np.testing.assert_allclose(cf.mu_tilde[:, 0], [0.15, 0.0, 0.0, 0.0])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 31 - 1), M=st.integers(1, 3), T=st.integers(1, 6))
def test_compact_form_reproduces_recursion(seed, M, T):
    rng = np.random.default_rng(seed)
    model = random_model(rng, T=T, M=M)
    cf = compact_form(decompose_coefficients(model), model)
    xi, eps = simulate_paths(model, 20, seed=seed % 1000)
    err = np.abs(xi - cf.xi_from_eps(eps.reshape(20, -1))).max()
    assert err <= 1e-10


def test_simulated_path_independent_of_batch_size():
    model = random_model(np.random.default_rng(1), T=4, M=2)
    a, _ = simulate_paths(model, 3, seed=7)
    b, _ = simulate_paths(model, 10, seed=7)
    np.testing.assert_array_equal(a, b[:3])


def test_theta_stack_is_causal(rng):
    model = random_model(rng, T=5, M=2)
    cf = compact_form(decompose_coefficients(model), model)
    for t in range(5):
        # stage t only sees noise of stages 1..t
        assert not np.any(cf.Theta[t][:, 2 * (t + 1):])


@pytest.mark.parametrize("bad, message", [
    (dict(alpha=[[[0.0, 0.5]]]), "alpha_0"),
    (dict(alpha=[[[1.0, 0.0]]]), "alpha_p"),
    (dict(beta=[[[1.0, 0.0]]]), "beta_q"),
    (dict(sigma=[[[-1.0]]]), "semi-definite"),
])
def test_model_validation(bad, message):
    kw = dict(alpha=[[[1.0, 0.5]]], beta=[[[1.0]]], mu=[[0.0]], sigma=[[[1.0]]], xi_hist=[[0.0]])
    kw.update(bad)
    with pytest.raises(ModelError, match=message):
        TimeSeriesModel(**kw)


def test_short_history_is_rejected():
    model = TimeSeriesModel(alpha=[[[1.0, 0.5, 0.2]]], beta=[[[1.0]]], mu=[[0.0]], sigma=[[[1.0]]], xi_hist=[[1.0]])
    with pytest.raises(ModelError):
        compact_form(decompose_coefficients(model), model)


def test_psd_factor_handles_singular(rng):
    v = rng.normal(size=(4, 2))
    cov = v @ v.T
    L = psd_factor(cov)
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-12)
