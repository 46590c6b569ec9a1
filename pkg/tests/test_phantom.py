import numpy as np
import pytest
from hypothesis import given, strategies as st

from rstmri.errors import InvalidSpecError
from rstmri.phantom import PhantomSpec, frame_at, generate_cine


def test_small_spec_dims_and_range():
    spec = PhantomSpec(frames=4, height=16, width=16, slices=1, n_ellipses=2,
                       motion_amplitude=0.1, period_frames=4, noise_sigma=0, seed=7)
    img = generate_cine(spec)
    assert img.shape == (4, 16, 16, 1)
    assert img.dtype == np.float32
    assert img.min() >= 0 and img.max() <= 1


def test_zero_motion_frames_identical():
    img = generate_cine(PhantomSpec(frames=5, motion_amplitude=0.0, seed=3))
    for t in range(1, 5):
        assert np.array_equal(img[t], img[0])
    assert np.array_equal(frame_at(img, 0), frame_at(img, 3))


def test_deterministic():
    spec = PhantomSpec(frames=6, noise_sigma=0.02, seed=11)
    assert np.array_equal(generate_cine(spec), generate_cine(spec))


def test_seed_changes_content():
    a = generate_cine(PhantomSpec(frames=2, seed=1))
    b = generate_cine(PhantomSpec(frames=2, seed=2))
    assert not np.array_equal(a, b)


def test_motion_changes_frames():
    img = generate_cine(PhantomSpec(frames=8, period_frames=8, motion_amplitude=0.08, seed=5))
    assert not np.array_equal(img[0], img[2])


@pytest.mark.parametrize("period,frames", [(4, 12), (6, 18), (3, 9)])
def test_periodicity(period, frames):
    img = generate_cine(PhantomSpec(frames=frames, period_frames=period, seed=2))
    for t in range(frames - period):
        assert np.array_equal(img[t], img[t + period])


def test_frame_at_values_and_bounds():
    img = generate_cine(PhantomSpec(frames=4, seed=0))
    assert np.array_equal(frame_at(img, 0), img[0])
    with pytest.raises(IndexError):
        frame_at(img, 4)
    with pytest.raises(IndexError):
        frame_at(img, -1)


def test_slices_are_shifted_copies():
    img = generate_cine(PhantomSpec(frames=2, slices=3, seed=4))
    assert img.shape == (2, 32, 32, 3)
    assert not np.array_equal(img[..., 0], img[..., 1])
    # same anatomy, small displacement: slices stay highly correlated
    c = np.corrcoef(img[0, :, :, 0].ravel(), img[0, :, :, 1].ravel())[0, 1]
    assert c > 0.9


@pytest.mark.parametrize("field", ["frames", "height", "width", "slices", "n_ellipses"])
def test_zero_dimension_rejected(field):
    with pytest.raises(InvalidSpecError):
        generate_cine(PhantomSpec(**{field: 0}))


def test_bad_amplitude_and_noise_rejected():
    with pytest.raises(InvalidSpecError):
        generate_cine(PhantomSpec(motion_amplitude=0.3))
    with pytest.raises(InvalidSpecError):
        generate_cine(PhantomSpec(noise_sigma=-1))
    with pytest.raises(InvalidSpecError):
        generate_cine(PhantomSpec(period_frames=0))


def test_ellipse_leaving_fov_rejected():
    with pytest.raises(InvalidSpecError):
        generate_cine(PhantomSpec(height=4, width=4, n_ellipses=3, motion_amplitude=0.25))
    with pytest.raises(InvalidSpecError):
        # slice displacement accumulates until the body ellipse crosses the edge
        generate_cine(PhantomSpec(frames=1, slices=40))


def test_noise_is_added_and_clamped():
    clean = generate_cine(PhantomSpec(frames=2, seed=9))
    noisy = generate_cine(PhantomSpec(frames=2, seed=9, noise_sigma=0.05))
    assert not np.array_equal(clean, noisy)
    assert noisy.min() >= 0 and noisy.max() <= 1


@given(
    seed=st.integers(0, 2**64 - 1),
    n=st.integers(1, 5),
    amp=st.floats(0.0, 0.1),
    noise=st.floats(0.0, 0.2),
)
def test_range_property(seed, n, amp, noise):
    img = generate_cine(PhantomSpec(frames=3, height=32, width=32, n_ellipses=n,
                                    motion_amplitude=amp, noise_sigma=noise, seed=seed))
    assert np.isfinite(img).all()
    assert img.min() >= 0 and img.max() <= 1
