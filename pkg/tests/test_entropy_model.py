import numpy as np
import pytest

from rnvc import entropy_model as em
from rnvc import tensor as T

from helpers import check_directional

F64 = np.float64


def test_logistic_pmf_closed_form():
    # 1/(1+e^-0.5) - 1/(1+e^0.5) = 0.2449186624...
    val = em.logistic_pmf(0.0, 0.0, 1.0)
    assert abs(float(val) - 0.2449186624037092) < 1e-12


def test_pmf_table_sums_to_one_with_tail_absorption():
    rng = np.random.default_rng(0)
    mu = rng.uniform(-70, 70, size=200)
    s = rng.uniform(em.S_MIN, 40.0, size=200)
    table = em.pmf_table(mu, s, lsym=64)
    assert table.shape == (200, 129)
    np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(table >= 0.0)


def test_pmf_symmetry():
    ys = np.arange(-5, 6, dtype=np.float64)
    a = em.logistic_pmf(ys, 1.3, 0.7)
    b = em.logistic_pmf(-ys, -1.3, 0.7)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_quantized_rows_normalize_exactly():
    rng = np.random.default_rng(1)
    mu = np.concatenate([rng.uniform(-64, 64, 500), [64.0, -64.0, 0.0]])
    s = np.concatenate([rng.uniform(em.S_MIN, 30.0, 500), [em.S_MIN, em.S_MIN, 100.0]])
    params = em.PmfParams(T.constant(mu), T.constant(s))
    rows = em.cdf_rows_for(params, lsym=64)
    freqs = np.diff(rows, axis=1)
    assert np.all(rows[:, 0] == 0)
    assert np.all(rows[:, -1] == 65536)
    assert np.all(freqs >= 1)
    assert np.all(freqs.sum(axis=1) == 65536)


def test_rate_bits_single_element():
    params = em.PmfParams(T.constant(np.zeros(1)), T.constant(np.ones(1)))
    bits = em.rate_bits(np.array([0]), params)
    # integer recomputation oracle of the quantized frequency
    table = em.pmf_table(np.zeros(1), np.ones(1), 64)[0]
    freqs = np.maximum(np.rint(table * 65536).astype(np.int64), 1)
    freqs[np.argmax(freqs)] += 65536 - freqs.sum()
    expected = -np.log2(freqs[64] / 65536.0)
    np.testing.assert_allclose(bits, expected, rtol=1e-12)
    # tail flooring moves it only slightly off the continuous 2.0296 bits
    assert abs(bits - 2.0296253857814383) < 0.02
    assert bits >= 0.0


def test_rate_bits_rejects_out_of_alphabet():
    params = em.PmfParams(T.constant(np.zeros(1)), T.constant(np.ones(1)))
    with pytest.raises(ValueError):
        em.rate_bits(np.array([65]), params)


def test_train_rate_matches_closed_form():
    y = T.constant(np.zeros((1, 1, 1, 1), dtype=F64))
    params = em.PmfParams(T.constant(np.zeros((1, 1, 1, 1), dtype=F64)),
                          T.constant(np.ones((1, 1, 1, 1), dtype=F64)))
    bits = em.train_rate_bits(y, params)
    assert abs(bits.item() - 2.0296253857814383) < 1e-10


def test_train_and_coder_pmf_share_formula():
    # continuous pmf at integer inputs == interior entries of the coded table
    rng = np.random.default_rng(2)
    mu = rng.uniform(-3, 3, size=50)
    s = rng.uniform(0.05, 5.0, size=50)
    ys = rng.integers(-50, 51, size=50).astype(np.float64)
    cont = em.logistic_pmf(ys, mu, s)
    table = em.pmf_table(mu, s, lsym=64)
    discrete = table[np.arange(50), (ys + 64).astype(int)]
    np.testing.assert_array_equal(cont, discrete)


def test_train_rate_grads_vs_fd():
    for seed in range(20):
        rng = np.random.default_rng(3000 + seed)
        y = T.parameter(rng.uniform(-4, 4, size=(1, 2, 3, 3)))
        mu = T.parameter(rng.uniform(-2, 2, size=(1, 2, 3, 3)))
        raw = T.parameter(rng.uniform(-1, 2, size=(1, 2, 3, 3)))

        def loss():
            params = em.PmfParams(mu, T.add(T.softplus(raw), em.S_MIN))
            return em.train_rate_bits(y, params)

        err = check_directional(loss, [y, mu, raw], rng)
        assert err < 1e-4, f"seed {seed}: {err}"


def test_zero_weight_prior_outputs_softplus_zero():
    prior = em.RecurrentPrior(2, 4, rng=np.random.default_rng(4), dtype=F64)
    for _, p in prior.params():
        p.data[:] = 0.0
    y = T.constant(np.random.default_rng(5).standard_normal((1, 2, 4, 4)))
    params, _ = prior.step(y, prior.zero_state(1, 4, 4, F64))
    np.testing.assert_array_equal(params.mu.data, 0.0)
    np.testing.assert_allclose(params.s.data, np.log(2.0) + em.S_MIN, rtol=1e-12)


def test_prior_consumes_only_history():
    # params for frame t come from y_{t-1} and state; y_t is not an input
    rng = np.random.default_rng(6)
    prior = em.RecurrentPrior(2, 4, rng=rng, dtype=F64)
    y1 = T.constant(rng.standard_normal((1, 2, 4, 4)))
    state = prior.zero_state(1, 4, 4, F64)
    params_a, state_a = prior.step(y1, state)
    params_b, _ = prior.step(y1, prior.zero_state(1, 4, 4, F64))
    np.testing.assert_array_equal(params_a.mu.data, params_b.mu.data)
    # advancing with different next latents changes only *later* params
    y2a = T.constant(rng.standard_normal((1, 2, 4, 4)))
    params_next, _ = prior.step(y2a, state_a)
    assert not np.array_equal(params_next.mu.data, params_a.mu.data)


def test_factorized_prior_init_scale_is_one():
    prior = em.FactorizedPrior(3, dtype=F64)
    params = prior.pmf_params(1, 2, 2)
    np.testing.assert_allclose(params.s.data, 1.0, rtol=1e-12)
    np.testing.assert_array_equal(params.mu.data, 0.0)


def test_factorized_rate_broadcasts_channels():
    rng = np.random.default_rng(7)
    prior = em.FactorizedPrior(2, dtype=F64)
    prior.mu.data[:] = [1.0, -2.0]
    values = rng.integers(-5, 6, size=(1, 2, 3, 3))
    bits = em.factorized_rate(values, prior)
    params = prior.pmf_params(1, 3, 3)
    np.testing.assert_allclose(bits, em.rate_bits(values, params), rtol=1e-12)
    assert bits >= 0.0


def test_prior_step_shape_guard():
    prior = em.RecurrentPrior(2, 4, rng=np.random.default_rng(8))
    y = T.constant(np.zeros((1, 3, 4, 4), dtype=np.float32))
    with pytest.raises(T.ShapeError):
        prior.step(y, prior.zero_state(1, 4, 4))
