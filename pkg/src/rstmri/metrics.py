"""Training loss and evaluation metrics.

The ``*_t`` functions operate on diffcore Tensors holding frame stacks of
shape ``(..., H, W)`` and are differentiable; the plain-named functions take
numpy arrays and return floats. Sequences ``(T, H, W, Z)`` are scored per
(t, z) frame and averaged.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import Tensor, no_grad
from .diffcore import ops as F
from .errors import ConfigError, ShapeError, SizeError

MSE_EPS = 1e-10


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class SsimParams:
    max_value: float = 1.0
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    window: int = 11
    sigma: float = 1.5
    scales: int = 3

    def __post_init__(self):
        if self.max_value <= 0 or self.dynamic_range <= 0 or self.k1 <= 0 or self.k2 <= 0:
            raise ConfigError("max_value, dynamic_range, k1 and k2 must be positive")
        if self.scales < 1:
            raise ConfigError(f"scales must be >= 1, got {self.scales}")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    def max_scales(self, h, w):
        n = 0
        while min(h, w) // 2**n >= self.window:
            n += 1
        return n

    def fit(self, h, w):
        """Same parameters with ``scales`` lowered to what an ``h x w`` frame supports."""
        n = self.max_scales(h, w)
        if n < 1:
            raise SizeError(f"frame {h}x{w} is smaller than the {self.window}x{self.window} window")
        return replace(self, scales=min(self.scales, n))


def _check_pair(x, y):
    if tuple(x.shape) != tuple(y.shape):
        raise ShapeError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def _as_t(a):
    return a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))


# -- differentiable ----------------------------------------------------------


def l1_loss_t(x, y):
    _check_pair(x, y)
    return F.mean(F.absolute(x - y))


def mse_t(x, y):
    _check_pair(x, y)
    d = x - y
    return F.mean(d * d)


def psnr_loss_t(x, y, params=SsimParams()):
    """log10(MAX^2 / max(MSE, eps)), without the decibel factor of 10."""
    mse = F.clamp(mse_t(x, y), lo=MSE_EPS)
    return math.log10(params.max_value**2) - F.log10(mse)


def _ssim_maps(x, y, p):
    g = lambda v: F.gauss_filter(v, p.window, p.sigma)  # noqa: E731
    mx, my = g(x), g(y)
    sxx = g(x * x) - mx * mx
    syy = g(y * y) - my * my
    sxy = g(x * y) - mx * my
    lum = (2.0 * (mx * my) + p.c1) / (mx * mx + my * my + p.c1)
    cs = (2.0 * sxy + p.c2) / (sxx + syy + p.c2)
    return lum, cs


def _check_window(shape, p, scales):
    h, w = shape[-2], shape[-1]
    if min(h, w) // 2 ** (scales - 1) < p.window:
        raise SizeError(
            f"frame {h}x{w} does not support {scales} scale(s) with a {p.window}x{p.window} window"
        )


def ssim_t(x, y, params=SsimParams()):
    """Mean SSIM over all sliding windows of every frame in the stack."""
    _check_pair(x, y)
    _check_window(x.shape, params, 1)
    lum, cs = _ssim_maps(x, y, params)
    return F.mean(lum * cs)


def ms_ssim_t(x, y, params=SsimParams()):
    """Contrast-structure means at each dyadic scale, times full SSIM at the coarsest.

    The luminance comparison enters only once, at the coarsest scale. The
    per-frame product is averaged over frames.
    """
    _check_pair(x, y)
    _check_window(x.shape, params, params.scales)
    per_frame = None
    for j in range(params.scales):
        lum, cs = _ssim_maps(x, y, params)
        if j == params.scales - 1:
            term = F.mean(lum * cs, axis=(-2, -1))
        else:
            term = F.mean(cs, axis=(-2, -1))
            x, y = F.avg_pool2(x), F.avg_pool2(y)
        per_frame = term if per_frame is None else per_frame * term
    return F.mean(per_frame)


def composite_loss_t(x, y, weights=LossWeights(), params=SsimParams()):
    """-a * psnr_loss + (1 - a) * [b * (1 - ms_ssim) + (1 - b) * l1]."""
    a, b = weights.alpha, weights.beta
    psnr = psnr_loss_t(x, y, params)
    total = -a * psnr
    if a < 1.0:
        inner = None
        if b > 0.0:
            inner = b * (1.0 - ms_ssim_t(x, y, params))
        if b < 1.0:
            l1 = (1.0 - b) * l1_loss_t(x, y)
            inner = l1 if inner is None else inner + l1
        total = total + (1.0 - a) * inner
    return total


# -- numpy-facing ------------------------------------------------------------


def _scalar(fn, *args):
    with no_grad():
        return float(fn(*args).data)


def l1_loss(x, y):
    return _scalar(l1_loss_t, _as_t(x), _as_t(y))


def psnr_loss(x, y, params=SsimParams()):
    return _scalar(lambda a, b: psnr_loss_t(a, b, params), _as_t(x), _as_t(y))


def mse(x, y):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    _check_pair(x, y)
    return float(np.mean((x - y) ** 2))


def rmse(x, y):
    return math.sqrt(mse(x, y))


def psnr_db(x, y, max_value=1.0):
    return 10.0 * math.log10(max_value**2 / max(mse(x, y), MSE_EPS))


def ssim(x, y, params=SsimParams()):
    """SSIM of two frames ``(H, W)`` or the mean over stacks ``(N, H, W)``."""
    return _scalar(lambda a, b: ssim_t(a, b, params), _as_t(x), _as_t(y))


def ms_ssim(x, y, params=SsimParams()):
    return _scalar(lambda a, b: ms_ssim_t(a, b, params), _as_t(x), _as_t(y))


def composite_loss(x, y, weights=LossWeights(), params=SsimParams()):
    return _scalar(lambda a, b: composite_loss_t(a, b, weights, params), _as_t(x), _as_t(y))


def frames_of(img):
    """``(T, H, W, Z)`` -> ``(T*Z, H, W)`` stack, frame order (t, z)."""
    img = np.asarray(img)
    if img.ndim != 4:
        raise ShapeError(f"expected (T, H, W, Z), got {img.shape}")
    t, h, w, z = img.shape
    return img.transpose(0, 3, 1, 2).reshape(t * z, h, w)


def sequence_report(pred, truth, params=SsimParams()):
    """Table-style metrics for one sequence plus a per-(t, z) breakdown."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_pair(pred, truth)
    t, h, w, z = truth.shape
    p = params.fit(h, w)
    fp, ft = frames_of(pred), frames_of(truth)
    per_frame = []
    for i in range(fp.shape[0]):
        s = ssim(fp[i], ft[i], p)
        per_frame.append(
            {
                "t": i // z,
                "z": i % z,
                "rmse": rmse(fp[i], ft[i]),
                "psnr_db": psnr_db(fp[i], ft[i], p.max_value),
                "ssim": s,
                "ms_ssim": ms_ssim(fp[i], ft[i], p),
            }
        )
    mean_ssim = float(np.mean([f["ssim"] for f in per_frame]))
    return {
        "rmse": rmse(pred, truth),
        "psnr_db": psnr_db(pred, truth, p.max_value),
        "one_minus_ssim": 1.0 - mean_ssim,
        "ms_ssim": float(np.mean([f["ms_ssim"] for f in per_frame])),
        "ms_ssim_scales": p.scales,
        "per_frame": per_frame,
    }
