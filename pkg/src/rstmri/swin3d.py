"""3D (time x height x width) window attention with cyclic-shift masking.

Token grids are ``(B, T', H', W', C)`` tensors; functions also accept an
unbatched ``(T', H', W', C)`` grid and treat it as ``B = 1``.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .diffcore import Tensor
from .diffcore import ops as F
from .errors import ConfigError, ShapeError

MASK_VALUE = -1e9


@dataclass(frozen=True)
class WindowConfig:
    p: int = 2
    m: int = 4
    shifted: bool = False

    def __post_init__(self):
        if self.p < 1 or self.m < 1:
            raise ConfigError(f"window sizes must be positive, got P={self.p}, M={self.m}")
        if self.shifted and (self.p % 2 or self.m % 2):
            raise ConfigError(f"shifted windows need even sizes, got P={self.p}, M={self.m}")

    @property
    def size(self):
        return (self.p, self.m, self.m)

    @property
    def shift(self):
        return (self.p // 2, self.m // 2, self.m // 2) if self.shifted else (0, 0, 0)

    def fitted(self, dims):
        """Per-axis window and shift for a grid of ``dims = (T', H', W')``.

        An axis no longer than the window gets a single window spanning it and
        no shift along that axis.
        """
        window, shift = [], []
        for d, w, s in zip(dims, self.size, self.shift):
            if d <= w:
                window.append(d)
                shift.append(0)
            else:
                window.append(w)
                shift.append(s)
        return tuple(window), tuple(shift)


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _batched(grid):
    grid = _tensor(grid)
    if grid.ndim == 4:
        return grid.reshape((1,) + grid.shape), True
    if grid.ndim != 5:
        raise ShapeError(f"expected a (B, T', H', W', C) or (T', H', W', C) grid, got {grid.shape}")
    return grid, False


def padded_dims(dims, window):
    return tuple(-(-d // w) * w for d, w in zip(dims, window))


def pad_to_window(grid, window):
    """Zero-pad T', H', W' up to multiples of ``window``; returns ``(padded, original_dims)``."""
    x, squeeze = _batched(grid)
    dims = x.shape[1:4]
    target = padded_dims(dims, window)
    if target != dims:
        x = F.pad(x, [(0, 0)] + [(0, t - d) for d, t in zip(dims, target)] + [(0, 0)])
    if squeeze:
        x = x.reshape(x.shape[1:])
    return x, dims


def crop(grid, dims):
    x, squeeze = _batched(grid)
    if x.shape[1:4] != tuple(dims):
        x = x[:, : dims[0], : dims[1], : dims[2], :]
    if squeeze:
        x = x.reshape(x.shape[1:])
    return x


def window_count(dims, window):
    if any(d % w for d, w in zip(dims, window)):
        raise ShapeError(f"grid {dims} is not divisible by window {window}")
    return math.prod(d // w for d, w in zip(dims, window))


def window_partition(grid, window):
    """``(B, T', H', W', C)`` -> ``(B * N, P*M*M, C)``.

    Windows are ordered lexicographically by window coordinate (batch
    outermost) and tokens inside a window in (t, h, w) order.
    """
    x, _ = _batched(grid)
    b, t, h, w, c = x.shape
    p, m1, m2 = window
    window_count((t, h, w), window)
    x = x.reshape(b, t // p, p, h // m1, m1, w // m2, m2, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(-1, p * m1 * m2, c)


def window_reverse(windows, window, dims, batch=1):
    """Exact inverse of :func:`window_partition` for a grid of ``dims = (T', H', W')``."""
    windows = _tensor(windows)
    t, h, w = dims
    p, m1, m2 = window
    n = window_count(dims, window)
    if windows.ndim != 3 or windows.shape[0] != batch * n or windows.shape[1] != p * m1 * m2:
        raise ShapeError(
            f"{windows.shape} windows are inconsistent with grid {dims}, window {window}, batch {batch}"
        )
    c = windows.shape[2]
    x = windows.reshape(batch, t // p, h // m1, w // m2, p, m1, m2, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(batch, t, h, w, c)


def cyclic_shift(grid, offsets):
    """Torus-roll the token axes by ``offsets = (dt, dh, dw)``."""
    x, squeeze = _batched(grid)
    if any(offsets):
        x = F.roll(x, tuple(offsets), (1, 2, 3))
    if squeeze:
        x = x.reshape(x.shape[1:])
    return x


def region_labels(dims, window, shift, valid_dims=None):
    """Integer label per token of the *rolled* grid.

    Two tokens may attend to each other only if they share a label: same
    pre-roll region along every axis, and both real or both padding.
    """
    valid_dims = dims if valid_dims is None else valid_dims
    labels = np.zeros(dims, dtype=np.int64)
    for axis, (d, w, s) in enumerate(zip(dims, window, shift)):
        lab = np.zeros(d, dtype=np.int64)
        if s:
            lab[d - w : d - s] = 1
            lab[d - s :] = 2
        shape = [1, 1, 1]
        shape[axis] = d
        labels = labels * 3 + lab.reshape(shape)
    pad = np.zeros(dims, dtype=bool)
    pad[valid_dims[0] :, :, :] = True
    pad[:, valid_dims[1] :, :] = True
    pad[:, :, valid_dims[2] :] = True
    pad = np.roll(pad, tuple(-s for s in shift), (0, 1, 2))
    return labels * 2 + pad


@lru_cache(maxsize=64)
def _mask_cached(dims, window, shift, valid_dims):
    labels = region_labels(dims, window, shift, valid_dims)
    if labels.max() == 0:
        return None
    p, m1, m2 = window
    t, h, w = dims
    lw = labels.reshape(t // p, p, h // m1, m1, w // m2, m2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, p * m1 * m2)
    mask = np.where(lw[:, :, None] != lw[:, None, :], MASK_VALUE, 0.0)
    mask.setflags(write=False)
    return mask


def shifted_window_mask(dims, window, shift, valid_dims=None):
    """Additive ``(N, L, L)`` mask for a padded grid, or ``None`` when nothing is masked."""
    valid_dims = tuple(dims) if valid_dims is None else tuple(valid_dims)
    return _mask_cached(tuple(dims), tuple(window), tuple(shift), valid_dims)


def count_regions(dims, window, shift):
    """Number of distinct (window, region) attention groups in one pass."""
    p, m1, m2 = window
    t, h, w = dims
    labels = region_labels(dims, window, shift)
    lw = labels.reshape(t // p, p, h // m1, m1, w // m2, m2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, p * m1 * m2)
    return int(sum(len(np.unique(row)) for row in lw))


@lru_cache(maxsize=64)
def relative_position_index(window, table_window):
    """``(L, L)`` index into a bias table laid out for ``table_window``."""
    p, m1, m2 = window
    tp, tm1, tm2 = table_window
    coords = np.stack(np.meshgrid(np.arange(p), np.arange(m1), np.arange(m2), indexing="ij")).reshape(3, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel[0] += tp - 1
    rel[1] += tm1 - 1
    rel[2] += tm2 - 1
    idx = rel[0] * (2 * tm1 - 1) * (2 * tm2 - 1) + rel[1] * (2 * tm2 - 1) + rel[2]
    idx.setflags(write=False)
    return idx


def bias_table_size(table_window):
    p, m1, m2 = table_window
    return (2 * p - 1) * (2 * m1 - 1) * (2 * m2 - 1)


@dataclass
class AttentionParams:
    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    bias_table: Tensor
    heads: int
    table_window: tuple

    @classmethod
    def from_store(cls, store, prefix, heads, table_window):
        return cls(
            store[f"{prefix}.qkv.weight"],
            store[f"{prefix}.qkv.bias"],
            store[f"{prefix}.proj.weight"],
            store[f"{prefix}.proj.bias"],
            store[f"{prefix}.rel_bias"],
            heads,
            tuple(table_window),
        )


def attention_param_shapes(dim, heads, table_window):
    return {
        "qkv.weight": (dim, 3 * dim),
        "qkv.bias": (3 * dim,),
        "proj.weight": (dim, dim),
        "proj.bias": (dim,),
        "rel_bias": (bias_table_size(table_window), heads),
    }


def w_msa(windows, params, window, mask=None):
    """Multi-head self-attention inside each window.

    ``windows`` is ``(B * N, L, C)``; ``mask`` is ``(N, L, L)`` additive or ``None``.
    """
    windows = _tensor(windows)
    bn, length, c = windows.shape
    heads = params.heads
    if c % heads:
        raise ConfigError(f"{c} channels are not divisible by {heads} heads")
    d = c // heads
    qkv = F.linear(windows, params.qkv_weight, params.qkv_bias)
    qkv = qkv.reshape(bn, length, 3, heads, d).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = (q * (1.0 / math.sqrt(d))) @ k.permute(0, 1, 3, 2)
    idx = relative_position_index(tuple(window), params.table_window)
    bias = F.gather(params.bias_table, idx).permute(2, 0, 1)
    attn = attn + bias
    if mask is not None:
        n = mask.shape[0]
        if bn % n:
            raise ShapeError(f"{bn} windows are not a multiple of the mask's {n}")
        attn = attn.reshape(bn // n, n, heads, length, length)
        attn = F.masked_add(attn, mask[None, :, None])
        attn = attn.reshape(bn, heads, length, length)
    attn = F.softmax(attn, axis=-1)
    out = (attn @ v).permute(0, 2, 1, 3).reshape(bn, length, c)
    return F.linear(out, params.proj_weight, params.proj_bias)


def sw_msa(grid, params, cfg):
    """Window attention over a whole grid: pad, roll, partition, attend, undo.

    Uses shifted windows when ``cfg.shifted``; padded tokens never mix with
    real ones.
    """
    x, squeeze = _batched(grid)
    b = x.shape[0]
    dims = x.shape[1:4]
    window, shift = cfg.fitted(dims)
    x, _ = pad_to_window(x, window)
    pdims = x.shape[1:4]
    mask = shifted_window_mask(pdims, window, shift, dims)
    x = cyclic_shift(x, tuple(-s for s in shift))
    out = w_msa(window_partition(x, window), params, window, mask)
    out = window_reverse(out, window, pdims, batch=b)
    out = cyclic_shift(out, shift)
    out = crop(out, dims)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out
