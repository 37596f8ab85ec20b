import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rnvc import autoencoder as ae
from rnvc import tensor as T

from helpers import check_directional

F64 = np.float64


def make_pair(cin=1, latent=2, width=4, k=3, seed=0, dtype=F64, recurrent=True):
    rng = np.random.default_rng(seed)
    enc = ae.RecurrentEncoder(cin, latent, width, k, kind="residual",
                              recurrent=recurrent, rng=rng, dtype=dtype)
    dec = ae.RecurrentDecoder(latent, cin, width, k, recurrent=recurrent, rng=rng, dtype=dtype)
    return enc, dec


def test_zero_weights_give_zero_latent():
    enc, _ = make_pair()
    for _, p in enc.params():
        p.data[:] = 0.0
    for gdn in (enc.gdn1, enc.gdn2, enc.gdn3):
        gdn.beta.data[:] = 1.0  # keep the normalizers valid
    x = T.constant(np.random.default_rng(1).random((1, 1, 32, 32)))
    latent, _ = ae.encode_step(enc, x, enc.zero_state(1, 32, 32, F64))
    assert latent.values.shape == (2, 2, 2)
    np.testing.assert_array_equal(latent.values, 0)


def test_rounding_tie_rule():
    vals = np.array([2.5, -2.5, 0.5, -0.5, 1.49, -1.49])
    np.testing.assert_array_equal(ae.round_half_away(vals), [3.0, -3.0, 1.0, -1.0, 1.0, -1.0])


@given(st.lists(st.floats(-80, 80, allow_nan=False), min_size=1, max_size=50))
def test_quantizer_idempotent(vals):
    x = np.array(vals)
    once = ae.round_half_away(x)
    np.testing.assert_array_equal(ae.round_half_away(once), once)


def test_alphabet_closure_and_saturation_warning(caplog):
    x = np.array([[[100.2, -300.0], [63.6, -64.4]]])
    with caplog.at_level(logging.WARNING, logger="rnvc.autoencoder"):
        out = ae.quantize_latent(x, lsym=64)
    assert out.max() <= 64 and out.min() >= -64
    np.testing.assert_array_equal(out[0], [[64, -64], [64, -64]])
    assert any("saturation" in r.message for r in caplog.records)


def test_train_noise_is_centered_uniform():
    # Monte-Carlo check of the Uniform(-0.5, 0.5) relaxation
    rng = np.random.default_rng(42)
    draws = rng.uniform(-0.5, 0.5, size=1_000_000)
    assert -0.002 < draws.mean() < 0.002
    assert abs(draws.var() - 1.0 / 12.0) < 1e-3


def test_train_mode_adds_bounded_noise():
    enc, _ = make_pair(seed=2)
    rng = np.random.default_rng(3)
    x = T.constant(rng.random((1, 1, 32, 32)))
    state = enc.zero_state(1, 32, 32, F64)
    clean, _ = enc(x, state)
    noisy, _ = ae.encode_step(enc, x, enc.zero_state(1, 32, 32, F64), mode="train", rng=rng)
    delta = noisy.data - clean.data
    assert np.all(np.abs(delta) <= 0.5)
    assert np.any(delta != 0.0)


def test_decode_determinism():
    enc, dec = make_pair(seed=4)
    rng = np.random.default_rng(5)
    x = T.constant(rng.random((1, 1, 32, 32)))
    latent, _ = ae.encode_step(enc, x, enc.zero_state(1, 32, 32, F64))
    out1, _ = ae.decode_step(dec, latent, dec.zero_state(1, 32, 32, F64))
    out2, _ = ae.decode_step(dec, latent, dec.zero_state(1, 32, 32, F64))
    assert np.array_equal(out1.data, out2.data)
    assert out1.shape == (1, 1, 32, 32)


def test_encoder_input_must_divide_by_16():
    enc, _ = make_pair()
    x = T.constant(np.zeros((1, 1, 24, 24)))
    with pytest.raises(T.ShapeError):
        enc(x, enc.zero_state(1, 24, 24, F64))


def test_latents_are_causal_and_state_carries_history():
    enc, _ = make_pair(seed=6)
    rng = np.random.default_rng(7)
    x1 = T.constant(rng.random((1, 1, 32, 32)))
    x2 = T.constant(rng.random((1, 1, 32, 32)))
    x2_alt = T.constant(rng.random((1, 1, 32, 32)))

    state = enc.zero_state(1, 32, 32, F64)
    y1, state_after1 = enc(x1, state)
    y2, _ = enc(x2, state_after1)

    # frame-1 latent is untouched by whatever frame 2 is
    state = enc.zero_state(1, 32, 32, F64)
    y1_again, state_b = enc(x1, state)
    np.testing.assert_array_equal(y1.data, y1_again.data)

    # but frame-2 latents do depend on frame 1 through the state
    state_fresh = enc.zero_state(1, 32, 32, F64)
    y2_no_history, _ = enc(x2, state_fresh)
    assert not np.array_equal(y2.data, y2_no_history.data)

    # and on frame 2 itself
    y2_alt, _ = enc(x2_alt, state_b)
    assert not np.array_equal(y2.data, y2_alt.data)


def test_nonrecurrent_encoder_ignores_history():
    enc, _ = make_pair(seed=8, recurrent=False)
    rng = np.random.default_rng(9)
    x1 = T.constant(rng.random((1, 1, 32, 32)))
    x2 = T.constant(rng.random((1, 1, 32, 32)))
    _, state = enc(x1, None)
    y2_a, _ = enc(x2, state)
    y2_b, _ = enc(x2, None)
    np.testing.assert_array_equal(y2_a.data, y2_b.data)


def test_full_autoencoder_grads_vs_fd():
    enc, dec = make_pair(width=3, seed=10)
    rng = np.random.default_rng(11)
    x = T.constant(rng.random((1, 1, 32, 32)))
    noise = rng.uniform(-0.5, 0.5, size=(1, 2, 2, 2))
    params = [p for _, p in enc.params()] + [p for _, p in dec.params()]

    def loss():
        ytilde, _ = enc(x, enc.zero_state(1, 32, 32, F64))
        noisy = T.add(ytilde, T.constant(noise))
        xhat, _ = dec(noisy, dec.zero_state(1, 32, 32, F64))
        return T.square(T.sub(xhat, x)).sum()

    err = check_directional(loss, params, rng)
    assert err < 1e-4, f"rel err {err}"


def test_param_names_unique_and_complete():
    enc, dec = make_pair()
    names = ["enc." + n for n, _ in enc.params()] + ["dec." + n for n, _ in dec.params()]
    assert len(names) == len(set(names))
    assert any("cell" in n for n in names)
    assert any("gdn" in n for n in names)
    assert any("igdn" in n for n in names)
