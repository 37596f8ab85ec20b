import numpy as np
import pytest

from rnvc import metrics as MM
from rnvc import tensor as T

from helpers import check_directional

F64 = np.float64


def test_psnr_identical_caps_at_100():
    a = np.random.default_rng(0).random((1, 1, 8, 8))
    assert MM.psnr(a, a) == 100.0


def test_psnr_uniform_error_is_20db():
    a = np.zeros((1, 1, 16, 16))
    b = a + 0.1
    assert abs(MM.psnr(a, b, peak=1.0) - 20.0) < 1e-9


def test_psnr_symmetric():
    rng = np.random.default_rng(1)
    a = rng.random((1, 1, 8, 8))
    b = rng.random((1, 1, 8, 8))
    assert MM.psnr(a, b) == MM.psnr(b, a)


def test_psnr_decreases_with_noise():
    rng = np.random.default_rng(2)
    a = rng.random((1, 1, 16, 16))
    last = np.inf
    for amp in [0.01, 0.03, 0.1, 0.3]:
        noisy = a + amp * rng.standard_normal(a.shape)
        val = MM.psnr(a, noisy)
        assert val < last
        last = val


@pytest.mark.parametrize("size", [(16, 16), (32, 48), (64, 64), (50, 70)])
def test_msssim_self_is_exactly_one(size):
    rng = np.random.default_rng(3)
    a = rng.random((1, 1, *size))
    assert MM.msssim_value(a, a) == 1.0


def test_msssim_scale_selection():
    assert MM.msssim_scales(176, 176) == 5
    assert MM.msssim_scales(64, 64) == 3
    assert MM.msssim_scales(32, 32) == 2
    assert MM.msssim_scales(16, 16) == 1
    with pytest.raises(T.ShapeError):
        MM.msssim_scales(8, 8)


def test_msssim_orders_noise_levels():
    rng = np.random.default_rng(4)
    a = rng.random((1, 1, 64, 64))
    vals = []
    for amp in [0.0, 0.05, 0.2, 0.6]:
        b = np.clip(a + amp * rng.standard_normal(a.shape), 0.0, 1.0)
        vals.append(MM.msssim_value(a, b))
    assert all(vals[i] > vals[i + 1] for i in range(len(vals) - 1))
    assert 0.0 < vals[-1] < 1.0


def test_msssim_grad_vs_fd():
    for seed in range(5):
        rng = np.random.default_rng(5000 + seed)
        a = T.parameter(rng.random((1, 1, 32, 32)))
        b = T.constant(np.clip(a.data + 0.1 * rng.standard_normal(a.shape), 0, 1))

        def loss():
            return 1.0 - MM.msssim(a, b)

        err = check_directional(loss, [a], rng, tol=1e-3)
        assert err < 1e-3, f"seed {seed}: {err}"


def curve(points):
    return [MM.RdPoint(bpp, q) for bpp, q in points]


def test_bd_rate_identical_is_zero():
    a = curve([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)])
    assert abs(MM.bd_rate(a, a)) < 1e-9


def test_bd_rate_doubled_rate_is_plus_100():
    a = curve([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0), (0.8, 39.0)])
    b = curve([(0.2, 30.0), (0.4, 33.0), (0.8, 36.0), (1.6, 39.0)])
    assert abs(MM.bd_rate(a, b) - 100.0) < 0.1


def test_bd_rate_reciprocity():
    a = curve([(0.1, 30.0), (0.22, 33.0), (0.4, 35.5), (0.85, 38.8)])
    b = curve([(0.13, 30.5), (0.3, 33.4), (0.52, 35.8), (1.1, 39.2)])
    ab = MM.bd_rate(a, b)
    ba = MM.bd_rate(b, a)
    assert abs(ab + ba / (1.0 + ba / 100.0)) < abs(ab) * 0.01 + 1e-6


def test_bd_rate_against_dense_sampling_oracle():
    # quality = a + b*log10(rate) makes log10(rate) linear in quality, so the
    # cubic fit is exact and dense trapezoid integration is an oracle
    def make(a_c, b_c, rates):
        return [MM.RdPoint(r, a_c + b_c * np.log10(r)) for r in rates]

    rates = [0.1, 0.2, 0.45, 0.9]
    ca = make(40.0, 10.0, rates)
    cb = make(38.5, 9.0, rates)
    got = MM.bd_rate(ca, cb)

    qa = [p.quality for p in ca]
    qb = [p.quality for p in cb]
    lo, hi = max(min(qa), min(qb)), min(max(qa), max(qb))
    qs = np.linspace(lo, hi, 20001)
    log_ra = (qs - 40.0) / 10.0
    log_rb = (qs - 38.5) / 9.0
    avg = np.trapezoid(log_rb - log_ra, qs) / (hi - lo)
    expected = (10.0**avg - 1.0) * 100.0
    assert abs(got - expected) <= abs(expected) * 0.005


def test_bd_rate_requires_overlap():
    a = curve([(0.1, 30.0), (0.2, 31.0), (0.4, 32.0), (0.8, 33.0)])
    b = curve([(0.1, 40.0), (0.2, 41.0), (0.4, 42.0), (0.8, 43.0)])
    with pytest.raises(ValueError):
        MM.bd_rate(a, b)


def test_bd_rate_requires_four_points():
    a = curve([(0.1, 30.0), (0.2, 33.0), (0.4, 36.0)])
    with pytest.raises(ValueError):
        MM.bd_rate(a, a)


def test_rd_point_validation():
    with pytest.raises(ValueError):
        MM.RdPoint(0.0, 30.0)


def test_rd_csv_roundtrip(tmp_path):
    rows = [{"lambda_id": 0, "bpp": 0.21, "psnr": 31.5, "msssim": 0.93}]
    path = tmp_path / "rd.csv"
    MM.write_rd_csv(path, rows)
    text = path.read_text().splitlines()
    assert text[0] == "lambda_id,bpp,psnr,msssim"
    assert text[1].startswith("0,0.21")
