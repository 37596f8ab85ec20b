import numpy as np
import pytest

from rnvc import layers as L
from rnvc import tensor as T

from helpers import check_directional

F64 = np.float64


def make_cell(cin=2, hidden=3, seed=0, dtype=F64):
    return L.ConvLstmCell(cin, hidden, 3, rng=np.random.default_rng(seed), dtype=dtype)


def test_convlstm_zero_params_is_zero_map():
    cell = make_cell()
    cell.gates.w.data[:] = 0.0
    cell.gates.b.data[:] = 0.0
    x = T.constant(np.random.default_rng(1).standard_normal((1, 2, 4, 4)))
    y, state = cell(x, cell.zero_state(1, 4, 4, F64))
    np.testing.assert_array_equal(y.data, 0.0)
    np.testing.assert_array_equal(state.c.data, 0.0)


def test_convlstm_bias_only_closed_form():
    cell = make_cell()
    cell.gates.w.data[:] = 0.0
    rng = np.random.default_rng(2)
    cell.gates.b.data[:] = rng.standard_normal(cell.gates.b.size)
    b = cell.gates.b.data
    hd = cell.hidden
    x = T.constant(np.zeros((1, 2, 5, 5), dtype=F64))
    y, state = cell(x, cell.zero_state(1, 5, 5, F64))

    # independent closed-form evaluation of the gate equations
    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    c_ref = sig(b[0:hd]) * np.tanh(b[3 * hd : 4 * hd])
    h_ref = sig(b[2 * hd : 3 * hd]) * np.tanh(c_ref)
    for ch in range(hd):
        np.testing.assert_allclose(state.c.data[0, ch], c_ref[ch], rtol=1e-12)
        np.testing.assert_allclose(y.data[0, ch], h_ref[ch], rtol=1e-12)


def test_convlstm_state_shape_mismatch():
    cell = make_cell()
    x = T.constant(np.zeros((1, 2, 4, 4)))
    bad = cell.zero_state(1, 6, 6, F64)
    with pytest.raises(T.ShapeError):
        cell(x, bad)


def test_convlstm_unrolled_grads_vs_fd():
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        cell = make_cell(seed=seed)
        xs = [T.parameter(rng.standard_normal((1, 2, 4, 4))) for _ in range(3)]
        params = [cell.gates.w, cell.gates.b] + xs

        def loss():
            state = cell.zero_state(1, 4, 4, F64)
            total = None
            for x in xs:
                y, state = cell(x, state)
                term = T.square(y).sum()
                total = term if total is None else total + term
            return total

        err = check_directional(loss, params, rng)
        assert err < 1e-4, f"seed {seed}: {err}"


def test_gdn_identity_when_beta_one_gamma_zero():
    gdn = L.GdnLayer(3, dtype=F64)
    gdn.gamma.data[:] = 0.0
    gdn.beta.data[:] = 1.0
    x = T.constant(np.random.default_rng(3).standard_normal((2, 3, 4, 4)))
    out = gdn(x)
    np.testing.assert_allclose(out.data, x.data, rtol=1e-12)


def test_gdn_closed_form_single_channel():
    gdn = L.GdnLayer(1, dtype=F64)
    gdn.gamma.data[:] = 1.0
    gdn.beta.data[:] = 1.0
    x = T.constant(np.ones((1, 1, 1, 1), dtype=F64))
    out = gdn(x)
    np.testing.assert_allclose(out.item(), 1.0 / np.sqrt(2.0), rtol=1e-12)


def test_igdn_grads_vs_fd():
    for seed in range(5):
        rng = np.random.default_rng(200 + seed)
        gdn = L.GdnLayer(3, inverse=True, dtype=F64)
        gdn.beta.data[:] = rng.uniform(0.5, 1.5, 3)
        gdn.gamma.data[:] = rng.uniform(0.0, 0.3, (3, 3))
        x = T.parameter(rng.standard_normal((1, 3, 4, 4)))
        params = [x, gdn.beta, gdn.gamma]

        def loss():
            return T.square(gdn(x)).sum()

        err = check_directional(loss, params, rng)
        assert err < 1e-4, f"seed {seed}: {err}"


def test_gdn_output_bounded_by_beta_min():
    rng = np.random.default_rng(4)
    gdn = L.GdnLayer(2, dtype=F64, beta_min=1e-6)
    gdn.beta.data[:] = 1e-6
    gdn.gamma.data[:] = rng.uniform(0, 0.5, (2, 2))
    x = T.constant(rng.standard_normal((1, 2, 8, 8)))
    out = gdn(x)
    bound = np.abs(x.data) / np.sqrt(1e-6)
    assert np.all(np.abs(out.data) <= bound + 1e-9)


def test_gdn_projection_idempotent():
    gdn = L.GdnLayer(4)
    gdn.beta.data[:] = np.array([-1.0, 0.0, 0.5, 2.0], dtype=np.float32)
    gdn.gamma.data[0, 1] = -3.0
    gdn.project()
    beta1 = gdn.beta.data.copy()
    gamma1 = gdn.gamma.data.copy()
    gdn.project()
    np.testing.assert_array_equal(gdn.beta.data, beta1)
    np.testing.assert_array_equal(gdn.gamma.data, gamma1)
    assert np.all(gdn.beta.data >= L.GDN_BETA_MIN)
    assert np.all(gdn.gamma.data >= 0.0)


def test_gdn_rejects_nonpositive_beta():
    gdn = L.GdnLayer(2)
    gdn.beta.data[:] = 0.0
    with pytest.raises(T.NumericsError):
        gdn(T.constant(np.ones((1, 2, 2, 2), dtype=np.float32)))


def test_forget_gate_bias_init():
    cell = make_cell(hidden=4)
    b = cell.gates.b.data
    np.testing.assert_array_equal(b[4:8], 1.0)
    np.testing.assert_array_equal(b[:4], 0.0)
    np.testing.assert_array_equal(b[8:], 0.0)
