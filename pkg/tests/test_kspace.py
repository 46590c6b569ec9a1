import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rstmri.errors import InfeasibleAccelerationError, ShapeError
from rstmri.kspace import (
    central_band,
    dft2_frames,
    idft2_frames,
    make_vista_mask,
    normalize_p99,
    undersample,
    zero_filled_recon,
)
from rstmri.metrics import rmse
from rstmri.phantom import PhantomSpec, generate_cine


def centered_dft_oracle(frame):
    """Direct double sum with the DC term at (H//2, W//2)."""
    h, w = frame.shape
    out = np.zeros((h, w), dtype=complex)
    ys, xs = np.arange(h) - h // 2, np.arange(w) - w // 2
    for ky in range(h):
        for kx in range(w):
            ph = np.exp(-2j * np.pi * (np.outer(ys, np.ones(w)) * ys[ky] / h + np.outer(np.ones(h), xs) * xs[kx] / w))
            out[ky, kx] = np.sum(frame * ph)
    return out / math.sqrt(h * w)


def energy(a):
    return math.fsum(float(abs(v)) ** 2 for v in np.asarray(a).ravel())


def test_matches_direct_sum(rng):
    for h, w in [(6, 6), (5, 8), (7, 3)]:
        x = rng.standard_normal((1, h, w, 1))
        k = dft2_frames(x)
        np.testing.assert_allclose(k[0, :, :, 0], centered_dft_oracle(x[0, :, :, 0]), atol=1e-12)


def test_impulse_has_flat_spectrum():
    h = w = 16
    x = np.zeros((1, h, w, 1))
    x[0, h // 2, w // 2, 0] = 1.0
    k = dft2_frames(x)
    np.testing.assert_allclose(np.abs(k), 1 / math.sqrt(h * w), atol=1e-15)


def test_dc_coefficient_gives_constant_image():
    k = np.zeros((2, 8, 8, 1), dtype=complex)
    k[:, 4, 4, 0] = 3.0
    np.testing.assert_allclose(idft2_frames(k), 3.0 / 8, atol=1e-15)


def test_zero_kspace_gives_zero_image():
    assert not np.any(idft2_frames(np.zeros((2, 8, 8, 1), dtype=np.complex64)))
    assert not np.any(zero_filled_recon(np.zeros((2, 8, 8, 1), dtype=np.complex64)))


def test_roundtrip_float32(rng):
    x = rng.random((4, 32, 32, 2)).astype(np.float32)
    k = dft2_frames(x)
    assert k.dtype == np.complex64
    assert np.max(np.abs(idft2_frames(k) - x)) < 1e-6


def test_energy_preserved_100_trials():
    for trial in range(100):
        r = np.random.default_rng(trial)
        x = r.standard_normal((2, 12, 16, 1)) + 1j * r.standard_normal((2, 12, 16, 1))
        e0, e1 = energy(x), energy(dft2_frames(x))
        assert abs(e0 - e1) / e0 < 1e-5


def test_shape_checks():
    with pytest.raises(ShapeError):
        dft2_frames(np.zeros((8, 8)))
    with pytest.raises(ShapeError):
        idft2_frames(np.zeros((8, 8, 1)))


def test_r1_mask_all_ones():
    assert make_vista_mask(3, 16, 16, 1, 0).all()


def test_r9_exact_row_count():
    m = make_vista_mask(8, 144, 1, 9, 123)
    assert m.dtype == np.uint8
    for f in m:
        assert int(f[:, 0].sum()) == 16
    frac = m.mean()
    assert 0.85 / 9 <= frac <= 1.15 / 9


def test_union_exceeds_single_frame():
    m = make_vista_mask(8, 144, 1, 9, 5)[:, :, 0].astype(bool)
    union = m.any(axis=0).sum()
    assert union > max(f.sum() for f in m)


def test_mask_constant_along_width_and_binary():
    m = make_vista_mask(4, 32, 20, 4, 0)
    assert set(np.unique(m)) <= {0, 1}
    assert np.all(m == m[:, :, :1])


def test_central_band_always_sampled():
    band = central_band(64, 4)
    assert len(band) == max(1, math.ceil(64 / 32)) * 2
    for seed in range(10):
        m = make_vista_mask(4, 64, 1, 4, seed)
        assert m[:, band, 0].all()


def test_mask_determinism():
    assert np.array_equal(make_vista_mask(8, 32, 32, 4, 9), make_vista_mask(8, 32, 32, 4, 9))
    assert not np.array_equal(make_vista_mask(8, 32, 32, 4, 9), make_vista_mask(8, 32, 32, 4, 10))


def test_incoherence_over_50_seeds():
    # mean fraction of a frame's random rows that another frame also drew,
    # compared against the single-frame sampling density
    h, r, t = 144, 9, 8
    band = central_band(h, r)
    shared = []
    for seed in range(50):
        m = make_vista_mask(t, h, 1, r, seed)[:, :, 0].astype(bool)
        m[:, band] = False
        n = m[0].sum()
        for i in range(t):
            for j in range(i + 1, t):
                shared.append((m[i] & m[j]).sum() / n)
    assert np.mean(shared) < math.ceil(h / r) / h


def test_infeasible_acceleration():
    with pytest.raises(InfeasibleAccelerationError):
        make_vista_mask(2, 16, 16, 17, 0)
    with pytest.raises(InfeasibleAccelerationError):
        make_vista_mask(2, 16, 16, 0.5, 0)
    with pytest.raises(InfeasibleAccelerationError):
        make_vista_mask(2, 4, 4, 1, 0)


@given(h=st.integers(8, 96), r=st.floats(1.0, 8.0), seed=st.integers(0, 2**32))
def test_row_count_property(h, r, seed):
    m = make_vista_mask(3, h, 2, r, seed)
    assert np.all(m[:, :, 0].sum(axis=1) == math.ceil(h / r))


def test_undersample_identity_zero_selector(rng):
    k = (rng.standard_normal((2, 8, 8, 1)) + 1j * rng.standard_normal((2, 8, 8, 1))).astype(np.complex64)
    assert np.array_equal(undersample(k, np.ones((2, 8, 8), np.uint8)), k)
    assert not np.any(undersample(k, np.zeros((2, 8, 8), np.uint8)))
    sel = np.zeros((2, 8, 8), np.uint8)
    sel[:, 3, :] = 1
    out = undersample(k, sel)
    assert np.array_equal(out[:, 3], k[:, 3])
    assert not np.any(np.delete(out, 3, axis=1))
    with pytest.raises(ShapeError):
        undersample(k, np.ones((2, 8, 7), np.uint8))


def test_r1_data_passes_bit_exact():
    img = generate_cine(PhantomSpec(frames=4, seed=1))
    k = dft2_frames(img)
    mask = make_vista_mask(4, 32, 32, 1, 0)
    assert np.array_equal(undersample(k, mask), k)


def test_fully_sampled_recon_recovers_image():
    img = generate_cine(PhantomSpec(frames=3, seed=2))
    rec = zero_filled_recon(dft2_frames(img))
    np.testing.assert_allclose(rec, normalize_p99(img), atol=1e-5)


def test_zero_filled_worse_than_fully_sampled():
    img = generate_cine(PhantomSpec(frames=8, height=144, width=144, seed=3))
    k = dft2_frames(img)
    full = zero_filled_recon(k)
    under = zero_filled_recon(undersample(k, make_vista_mask(8, 144, 144, 9, 0)))
    assert rmse(under, img) > rmse(full, img)


def test_normalize_p99():
    x = np.linspace(0, 2, 1001)
    y = normalize_p99(x)
    assert y.max() == 1.0 and y.min() == 0.0
    assert abs(np.percentile(y, 99) - 1.0) < 1e-12
    assert not np.any(normalize_p99(np.zeros(10)))
