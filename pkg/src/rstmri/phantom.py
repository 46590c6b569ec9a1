"""Synthetic cine phantoms: soft-edged ellipses with one pulsating chamber.

Images are ``(T, H, W, Z)`` float32 arrays in ``[0, 1]``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpecError

# fraction of H by which each slice is displaced horizontally from the previous one
SLICE_SHIFT = 0.01
EDGE_SOFTNESS = 0.08


@dataclass(frozen=True)
class PhantomSpec:
    frames: int = 18
    height: int = 32
    width: int = 32
    slices: int = 1
    n_ellipses: int = 3
    motion_amplitude: float = 0.05
    period_frames: float = 18.0
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        for field in ("frames", "height", "width", "slices", "n_ellipses"):
            if int(getattr(self, field)) < 1:
                raise InvalidSpecError(f"{field} must be >= 1, got {getattr(self, field)}")
        if not 0.0 <= self.motion_amplitude <= 0.25:
            raise InvalidSpecError(f"motion_amplitude must lie in [0, 0.25], got {self.motion_amplitude}")
        if not self.period_frames > 0:
            raise InvalidSpecError(f"period_frames must be positive, got {self.period_frames}")
        if not self.noise_sigma >= 0:
            raise InvalidSpecError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidSpecError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class _Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    intensity: float
    # center displacement direction (unit vector scaled by amplitude in pixels)
    dy: float
    dx: float
    # radius pulsation in pixels (chamber only)
    pulse: float
    phase: float


def _layout(spec, rng):
    """Draw ellipse geometry; every ellipse is checked to stay inside the FOV for all t, z."""
    h, w = spec.height, spec.width
    amp = spec.motion_amplitude * h
    z_extent = SLICE_SHIFT * h * (spec.slices - 1)
    ellipses = []
    for i in range(spec.n_ellipses):
        if i == 0 and spec.n_ellipses > 1:
            # body: large, dim, nearly static
            ry, rx = rng.uniform(0.30, 0.36) * h, rng.uniform(0.30, 0.36) * w
            cy, cx = h / 2 + rng.uniform(-0.02, 0.02) * h, w / 2 + rng.uniform(-0.02, 0.02) * w
            ell = _Ellipse(cy, cx, ry, rx, rng.uniform(0.25, 0.35), 0.0, 0.0, 0.0, 0.0)
        elif i <= 1:
            # chamber: bright, radius pulsates with the cardiac period
            ry, rx = rng.uniform(0.10, 0.14) * h, rng.uniform(0.10, 0.14) * w
            cy, cx = h / 2 + rng.uniform(-0.05, 0.05) * h, w / 2 + rng.uniform(-0.05, 0.05) * w
            pulse = min(0.5 * amp, 0.5 * min(ry, rx))
            ell = _Ellipse(cy, cx, ry, rx, rng.uniform(0.55, 0.65), 0.0, 0.0, pulse, rng.uniform(0, 2 * math.pi))
        else:
            ry, rx = rng.uniform(0.04, 0.08) * h, rng.uniform(0.04, 0.08) * w
            theta = rng.uniform(0, 2 * math.pi)
            reach_y = ry + amp + 1.0
            reach_x = rx + amp + z_extent + 1.0
            if 2 * reach_y >= h or 2 * reach_x >= w:
                raise InvalidSpecError("motion amplitude too large for the field of view")
            cy = rng.uniform(reach_y, h - reach_y)
            cx = rng.uniform(reach_x, w - reach_x)
            ell = _Ellipse(
                cy, cx, ry, rx, rng.uniform(0.3, 0.5), amp * math.sin(theta), amp * math.cos(theta), 0.0,
                rng.uniform(0, 2 * math.pi),
            )
        ellipses.append(ell)
    for e in ellipses:
        ext_y = e.ry + e.pulse + abs(e.dy)
        ext_x = e.rx + e.pulse + abs(e.dx) + z_extent
        if e.cy - ext_y < 0 or e.cy + ext_y > h or e.cx - ext_x < 0 or e.cx + ext_x > w:
            raise InvalidSpecError("an ellipse leaves the field of view during its motion cycle")
    return ellipses


def _render(ellipses, h, w, t, z, spec):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    # (t mod period) keeps integer-period sequences exactly periodic
    cyc = 2.0 * math.pi * math.fmod(t, spec.period_frames) / spec.period_frames
    img = np.zeros((h, w))
    for e in ellipses:
        s = math.sin(cyc + e.phase)
        cy = e.cy + e.dy * s
        cx = e.cx + e.dx * s + SLICE_SHIFT * h * z
        ry, rx = e.ry + e.pulse * s, e.rx + e.pulse * s
        rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
        img += e.intensity / (1.0 + np.exp((rho - 1.0) / EDGE_SOFTNESS))
    return img


def generate_cine(spec):
    """Render a ``(T, H, W, Z)`` float32 cine sequence, deterministic in ``spec``."""
    spec.validate()
    rng = np.random.default_rng(int(spec.seed))
    ellipses = _layout(spec, rng)
    t_, h, w, z_ = spec.frames, spec.height, spec.width, spec.slices
    out = np.empty((t_, h, w, z_))
    for t in range(t_):
        for z in range(z_):
            out[t, :, :, z] = _render(ellipses, h, w, t, z, spec)
    if spec.noise_sigma > 0:
        out += rng.normal(0.0, spec.noise_sigma, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def frame_at(img, t):
    """Frame ``t`` of a ``(T, H, W, Z)`` sequence as an ``(H, W, Z)`` copy."""
    n = img.shape[0]
    if not 0 <= t < n:
        raise IndexError(f"frame {t} out of range for {n} frames")
    return img[t].copy()
