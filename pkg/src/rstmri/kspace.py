"""Single-coil Cartesian acquisition model.

k-space uses the centered unitary convention: DC sits at ``(H//2, W//2)`` and
the transform preserves energy.
"""

import math

import numpy as np

from .errors import InfeasibleAccelerationError, ShapeError

_AXES = (1, 2)


def _complex_dtype(x):
    return np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128


def dft2_frames(img):
    """Centered unitary 2D DFT of every (t, z) frame of a ``(T, H, W, Z)`` array."""
    img = np.asarray(img)
    if img.ndim != 4:
        raise ShapeError(f"expected (T, H, W, Z), got {img.shape}")
    k = np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img, axes=_AXES), axes=_AXES, norm="ortho"), axes=_AXES)
    return k.astype(_complex_dtype(img), copy=False)


def idft2_frames(k):
    """Inverse of :func:`dft2_frames`; returns the complex image."""
    k = np.asarray(k)
    if k.ndim != 4:
        raise ShapeError(f"expected (T, H, W, Z), got {k.shape}")
    x = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(k, axes=_AXES), axes=_AXES, norm="ortho"), axes=_AXES)
    return x.astype(_complex_dtype(k), copy=False)


def central_band(h, r):
    """Rows that every frame acquires, as a sorted index array."""
    n = math.ceil(h / r)
    width = min(n, max(1, math.ceil(h / (8 * r))) * 2)
    start = h // 2 - width // 2
    return np.arange(start, start + width)


def make_vista_mask(t, h, w, r, seed):
    """Variable-density, temporally incoherent phase-encode mask of shape ``(T, H, W)``.

    Each frame acquires exactly ``ceil(H / R)`` rows: a fixed central band plus
    rows drawn without replacement with Gaussian density centered on ``H/2``
    (std ``H/4``). Frame ``t`` draws from its own stream seeded by ``(seed, t)``.
    """
    if r < 1:
        raise InfeasibleAccelerationError(f"acceleration must be >= 1, got {r}")
    if r > h:
        raise InfeasibleAccelerationError(f"acceleration {r} exceeds the {h} available rows")
    if h < 8:
        raise InfeasibleAccelerationError(f"need at least 8 phase-encode rows, got {h}")
    n = math.ceil(h / r)
    band = central_band(h, r)
    rest = np.setdiff1d(np.arange(h), band)
    density = np.exp(-((rest - h / 2) ** 2) / (2 * (h / 4) ** 2))
    density /= density.sum()
    mask = np.zeros((t, h, w), dtype=np.uint8)
    for f in range(t):
        rng = np.random.default_rng([int(seed), f])
        picked = rng.choice(rest, size=n - len(band), replace=False, p=density)
        mask[f, band, :] = 1
        mask[f, picked, :] = 1
    return mask


def undersample(k, mask):
    """Zero the k-space samples the mask does not acquire."""
    k = np.asarray(k)
    mask = np.asarray(mask)
    if mask.shape != k.shape[:3]:
        raise ShapeError(f"mask {mask.shape} does not match k-space {k.shape[:3]}")
    return k * mask[..., None].astype(k.real.dtype)


def normalize_p99(mag):
    """Scale by one global factor so the 99th percentile maps to 1, then clip to [0, 1]."""
    p = float(np.percentile(mag, 99))
    if p <= 0:
        return np.zeros_like(mag)
    return np.clip(mag / mag.dtype.type(p), 0, 1)


def zero_filled_recon(k_under):
    """Magnitude image of undersampled k-space with missing samples left at zero."""
    mag = np.abs(idft2_frames(k_under))
    return normalize_p99(mag.astype(np.float32 if mag.dtype == np.float32 else np.float64))
