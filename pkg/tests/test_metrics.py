import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rstmri.diffcore import Tensor, check_function
from rstmri.errors import ConfigError, ShapeError, SizeError
from rstmri.metrics import (
    LossWeights,
    SsimParams,
    composite_loss,
    composite_loss_t,
    frames_of,
    l1_loss,
    ms_ssim,
    mse,
    psnr_db,
    psnr_loss,
    rmse,
    sequence_report,
    ssim,
)

import oracles


def test_l1_examples():
    x = np.random.default_rng(0).random((4, 4))
    assert l1_loss(x, x) == 0.0
    assert l1_loss(x, x + 0.25) == pytest.approx(0.25, abs=1e-12)
    assert l1_loss([0.0, 1.0], [1.0, 0.0]) == 1.0


def test_psnr_loss_examples():
    x = np.random.default_rng(1).random((8, 8))
    assert psnr_loss(x, x + 0.1) == pytest.approx(2.0, abs=1e-9)
    assert psnr_loss(x, x) == 10.0
    assert psnr_loss(np.zeros(4), np.ones(4)) == 0.0


def test_psnr_db_examples():
    x = np.zeros((10, 10))
    assert psnr_db(x, x + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr_db(x, x + 0.01) == pytest.approx(40.0, abs=1e-9)
    y = np.random.default_rng(2).random((10, 10))
    assert psnr_db(x, y) == pytest.approx(10 * psnr_loss(x, y), abs=1e-9)


def test_rmse_examples():
    x = np.random.default_rng(3).random(7)
    assert rmse(x, x) == 0.0
    assert rmse(x, x + 0.1) == pytest.approx(0.1, abs=1e-12)
    assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))
    assert mse([0, 0], [3, 4]) == 12.5


@pytest.mark.parametrize("fn", [l1_loss, rmse, mse, psnr_db, psnr_loss])
def test_shape_mismatch(fn):
    with pytest.raises(ShapeError):
        fn(np.zeros(3), np.zeros(4))


def test_ssim_identity_and_constants():
    x = np.random.default_rng(4).random((16, 16))
    assert ssim(x, x) == 1.0
    p = SsimParams()
    a, b = 0.3, 0.7
    expect = (2 * a * b + p.c1) / (a * a + b * b + p.c1)
    assert ssim(np.full((16, 16), a), np.full((16, 16), b)) == pytest.approx(expect, abs=1e-12)


def test_ssim_matches_oracle_on_16x16():
    r = np.random.default_rng(5)
    x, y = r.random((16, 16)), r.random((16, 16))
    assert abs(ssim(x, y) - oracles.ssim(x, y)) < 1e-6


def test_ssim_small_frame_rejected():
    with pytest.raises(SizeError):
        ssim(np.zeros((10, 16)), np.zeros((10, 16)))


def test_ms_ssim_identity_and_single_scale():
    r = np.random.default_rng(6)
    x, y = r.random((32, 32)), r.random((32, 32))
    assert ms_ssim(x, x, SsimParams(scales=2)) == pytest.approx(1.0, abs=1e-12)
    assert abs(ms_ssim(x, y, SsimParams(scales=1)) - ssim(x, y)) < 1e-7


def test_ms_ssim_two_scale_oracle():
    r = np.random.default_rng(7)
    x = r.random((32, 32))
    y = np.clip(x + 0.2 * r.standard_normal((32, 32)), 0, 1)
    assert abs(ms_ssim(x, y, SsimParams(scales=2)) - oracles.ms_ssim(x, y, 2)) < 1e-6


def test_ms_ssim_scale_count_limit():
    with pytest.raises(SizeError):
        ms_ssim(np.zeros((32, 32)), np.zeros((32, 32)), SsimParams(scales=3))
    assert SsimParams(scales=3).fit(32, 32).scales == 2
    assert SsimParams(scales=3).fit(44, 48).scales == 3
    with pytest.raises(SizeError):
        SsimParams().fit(8, 8)


def test_constants_are_derived():
    p = SsimParams(k1=0.02, k2=0.05, dynamic_range=2.0)
    assert p.c1 == (0.02 * 2.0) ** 2 and p.c2 == (0.05 * 2.0) ** 2
    with pytest.raises(ConfigError):
        SsimParams(scales=0)
    with pytest.raises(ConfigError):
        SsimParams(max_value=0)


def test_loss_weights_validated():
    with pytest.raises(ConfigError):
        LossWeights(alpha=1.5)
    with pytest.raises(ConfigError):
        LossWeights(beta=-0.1)


def test_composite_identity_value():
    x = np.random.default_rng(8).random((2, 32, 32))
    p = SsimParams(scales=2)
    assert composite_loss(x, x, LossWeights(0.5, 0.5), p) == -5.0


def test_composite_degeneracies():
    r = np.random.default_rng(9)
    x, y = r.random((3, 32, 32)), r.random((3, 32, 32))
    p = SsimParams(scales=2)
    assert abs(composite_loss(x, y, LossWeights(1.0, 0.5), p) + psnr_loss(x, y, p)) < 1e-7
    assert abs(composite_loss(x, y, LossWeights(0.0, 0.0), p) - l1_loss(x, y)) < 1e-7
    a, b = 0.3, 0.8
    expect = -a * psnr_loss(x, y, p) + (1 - a) * (b * (1 - ms_ssim(x, y, p)) + (1 - b) * l1_loss(x, y))
    assert abs(composite_loss(x, y, LossWeights(a, b), p) - expect) < 1e-12


def test_composite_gradient_20_frames():
    r = np.random.default_rng(10)
    p = SsimParams(scales=2)
    worst = 0.0
    for i in range(20):
        x = Tensor(r.random((1, 24, 24)))
        y = Tensor(r.random((1, 24, 24)))
        err = check_function(lambda: composite_loss_t(x, y, LossWeights(), p), [x], h=1e-4, rng=r, max_coords=60)
        worst = max(worst, err)
    assert worst < 1e-4


def test_symmetry():
    r = np.random.default_rng(11)
    x, y = r.random((32, 32)), r.random((32, 32))
    p = SsimParams(scales=2)
    for fn in (l1_loss, rmse):
        assert fn(x, y) == pytest.approx(fn(y, x), abs=1e-15)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
    assert ms_ssim(x, y, p) == pytest.approx(ms_ssim(y, x, p), abs=1e-12)


@given(d1=st.floats(0.001, 0.5), d2=st.floats(0.001, 0.5))
def test_offset_monotone(d1, d2):
    x = np.random.default_rng(12).random((6, 6))
    if abs(d1 - d2) < 1e-6:
        return
    lo, hi = sorted((d1, d2))
    assert rmse(x, x + lo) < rmse(x, x + hi)
    assert l1_loss(x, x + lo) < l1_loss(x, x + hi)


@given(seed=st.integers(0, 10**6), scale=st.floats(0.0, 1.0))
def test_ssim_upper_bound(seed, scale):
    r = np.random.default_rng(seed)
    x = r.random((16, 16))
    y = x + scale * r.standard_normal((16, 16))
    assert ssim(x, y) <= 1 + 1e-9
    x2, y2 = r.random((24, 24)), r.random((24, 24))
    assert ms_ssim(x2, y2, SsimParams(scales=2)) <= 1 + 1e-9


def test_frames_of_order():
    img = np.arange(2 * 3 * 3 * 2).reshape(2, 3, 3, 2)
    f = frames_of(img)
    assert f.shape == (4, 3, 3)
    assert np.array_equal(f[1], img[0, :, :, 1])
    assert np.array_equal(f[2], img[1, :, :, 0])


def test_sequence_report():
    r = np.random.default_rng(13)
    truth = r.random((3, 32, 32, 2))
    rep = sequence_report(truth, truth)
    assert rep["rmse"] == 0.0 and rep["one_minus_ssim"] == 0.0
    assert len(rep["per_frame"]) == 6
    assert rep["ms_ssim_scales"] == 2
    pred = np.clip(truth + 0.05, 0, 1)
    rep = sequence_report(pred, truth)
    assert rep["rmse"] == pytest.approx(rmse(pred, truth))
    assert rep["per_frame"][3]["t"] == 1 and rep["per_frame"][3]["z"] == 1
