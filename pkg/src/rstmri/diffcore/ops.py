"""The primitive set: forward kernels, backward kernels and shape rules."""

import math

import numpy as np
from scipy.special import erf

from ..errors import ShapeError
from .engine import Primitive, apply, register


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast(*shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from None


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# -- elementwise -------------------------------------------------------------


@register
class Add(Primitive):
    name = "add"

    def infer(self, a, b):
        return _broadcast(a, b)

    def forward(self, a, b):
        return a + b, (a.shape, b.shape)

    def backward(self, saved, g):
        sa, sb = saved
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


@register
class Sub(Primitive):
    name = "sub"

    def infer(self, a, b):
        return _broadcast(a, b)

    def forward(self, a, b):
        return a - b, (a.shape, b.shape)

    def backward(self, saved, g):
        sa, sb = saved
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


@register
class Mul(Primitive):
    name = "mul"

    def infer(self, a, b):
        return _broadcast(a, b)

    def forward(self, a, b):
        return a * b, (a, b)

    def backward(self, saved, g):
        a, b = saved
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register
class Div(Primitive):
    name = "div"

    def infer(self, a, b):
        return _broadcast(a, b)

    def forward(self, a, b):
        out = a / b
        return out, (b, out, a.shape)

    def backward(self, saved, g):
        b, out, sa = saved
        ga = g / b
        return _unbroadcast(ga, sa), _unbroadcast(-ga * out, b.shape)


@register
class Scale(Primitive):
    name = "scale"

    def infer(self, x, c):
        return x

    def forward(self, x, c):
        return x * x.dtype.type(c), None

    def backward(self, saved, g, c):
        return (g * g.dtype.type(c),)


@register
class Relu(Primitive):
    name = "relu"

    def infer(self, x):
        return x

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, mask, g):
        return (np.where(mask, g, 0).astype(g.dtype, copy=False),)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@register
class Gelu(Primitive):
    """Exact GELU, x * Phi(x)."""

    name = "gelu"

    def infer(self, x):
        return x

    def forward(self, x):
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        return (x * cdf).astype(x.dtype, copy=False), (x, cdf)

    def backward(self, saved, g):
        x, cdf = saved
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(g.dtype, copy=False),)


@register
class Abs(Primitive):
    name = "abs"

    def infer(self, x):
        return x

    def forward(self, x):
        return np.abs(x), np.sign(x)

    def backward(self, sign, g):
        return (g * sign,)


@register
class Log(Primitive):
    """Natural logarithm, or base-10 when ``base=10``."""

    name = "log"

    def infer(self, x, base=None):
        return x

    def forward(self, x, base=None):
        return (np.log10(x) if base == 10 else np.log(x)), x

    def backward(self, x, g, base=None):
        if base == 10:
            return (g / (x * x.dtype.type(math.log(10.0))),)
        return (g / x,)


@register
class Clamp(Primitive):
    """Clip to ``[lo, hi]``; gradient flows only where the input is inside."""

    name = "clamp"

    def infer(self, x, lo=None, hi=None):
        return x

    def forward(self, x, lo=None, hi=None):
        inside = np.ones(x.shape, dtype=bool)
        if lo is not None:
            inside &= x >= lo
        if hi is not None:
            inside &= x <= hi
        return np.clip(x, lo, hi).astype(x.dtype, copy=False), inside

    def backward(self, inside, g, lo=None, hi=None):
        return (np.where(inside, g, 0).astype(g.dtype, copy=False),)


@register
class MaskedAdd(Primitive):
    """x + mask, with ``mask`` a constant (no gradient)."""

    name = "masked_add"
    nondiff = (1,)

    def infer(self, x, mask):
        out = _broadcast(x, mask)
        if out != tuple(x):
            raise ShapeError(f"mask {mask} would broadcast input {x} to {out}")
        return out

    def forward(self, x, mask):
        return x + mask.astype(x.dtype, copy=False), None

    def backward(self, saved, g):
        return g, None


@register
class Dropout(Primitive):
    name = "dropout"

    def infer(self, x, rate=0.0, rng=None):
        return x

    def forward(self, x, rate=0.0, rng=None):
        if rate == 0.0:
            return x.copy(), None
        keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
        return x * keep, keep

    def backward(self, keep, g, rate=0.0, rng=None):
        return (g if keep is None else g * keep,)


# -- structural --------------------------------------------------------------


@register
class Reshape(Primitive):
    name = "reshape"

    def infer(self, x, shape):
        size = math.prod(x)
        shape = list(shape)
        if shape.count(-1) > 1:
            raise ShapeError("at most one -1 in reshape target")
        if -1 in shape:
            rest = math.prod(s for s in shape if s != -1)
            if rest == 0 or size % rest:
                raise ShapeError(f"cannot reshape {x} into {tuple(shape)}")
            shape[shape.index(-1)] = size // rest
        if math.prod(shape) != size:
            raise ShapeError(f"cannot reshape {x} into {tuple(shape)}")
        return tuple(shape)

    def forward(self, x, shape):
        return x.reshape(shape), x.shape

    def backward(self, in_shape, g, shape):
        return (g.reshape(in_shape),)


@register
class Permute(Primitive):
    name = "permute"

    def infer(self, x, axes):
        if sorted(axes) != list(range(len(x))):
            raise ShapeError(f"axes {axes} are not a permutation of {len(x)} dims")
        return tuple(x[a] for a in axes)

    def forward(self, x, axes):
        return np.ascontiguousarray(x.transpose(axes)), None

    def backward(self, saved, g, axes):
        return (np.ascontiguousarray(g.transpose(np.argsort(axes))),)


@register
class Concat(Primitive):
    name = "concat"

    def infer(self, *shapes, axis=-1):
        nd = len(shapes[0])
        ax = axis % nd
        for s in shapes[1:]:
            if len(s) != nd or any(a != b for i, (a, b) in enumerate(zip(s, shapes[0])) if i != ax):
                raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}")
        out = list(shapes[0])
        out[ax] = sum(s[ax] for s in shapes)
        return tuple(out)

    def forward(self, *xs, axis=-1):
        return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]

    def backward(self, sizes, g, axis=-1):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=axis))


@register
class Slice(Primitive):
    name = "slice"

    def infer(self, x, index):
        try:
            return np.empty(x, dtype=np.uint8)[index].shape
        except IndexError as exc:
            raise ShapeError(str(exc)) from None

    def forward(self, x, index):
        return np.array(x[index]), (x.shape, x.dtype)

    def backward(self, saved, g, index):
        shape, dtype = saved
        out = np.zeros(shape, dtype=g.dtype)
        out[index] = g
        return (out,)


@register
class Pad(Primitive):
    """Zero padding; ``widths`` is one (before, after) pair per axis."""

    name = "pad"

    def infer(self, x, widths):
        if len(widths) != len(x):
            raise ShapeError(f"pad widths {widths} do not match rank {len(x)}")
        return tuple(n + a + b for n, (a, b) in zip(x, widths))

    def forward(self, x, widths):
        return np.pad(x, widths), None

    def backward(self, saved, g, widths):
        index = tuple(slice(a, g.shape[i] - b) for i, (a, b) in enumerate(widths))
        return (np.ascontiguousarray(g[index]),)


@register
class Roll(Primitive):
    name = "roll"

    def infer(self, x, shifts, axes):
        return x

    def forward(self, x, shifts, axes):
        return np.roll(x, shifts, axes), None

    def backward(self, saved, g, shifts, axes):
        return (np.roll(g, tuple(-s for s in shifts), axes),)


@register
class Gather(Primitive):
    """table[index] along the leading axis; ``index`` is an integer array attribute."""

    name = "gather"

    def infer(self, table, index):
        return tuple(index.shape) + tuple(table[1:])

    def forward(self, table, index):
        return table[index], table.shape

    def backward(self, shape, g, index):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)


# -- reductions --------------------------------------------------------------


def _reduced(x, axis, keepdims):
    axes = _norm_axes(axis, len(x))
    if keepdims:
        return tuple(1 if i in axes else n for i, n in enumerate(x))
    return tuple(n for i, n in enumerate(x) if i not in axes)


@register
class Sum(Primitive):
    name = "sum"

    def infer(self, x, axis=None, keepdims=False):
        return _reduced(x, axis, keepdims)

    def forward(self, x, axis=None, keepdims=False):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims)), x.shape

    def backward(self, shape, g, axis=None, keepdims=False):
        axes = _norm_axes(axis, len(shape))
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)


@register
class Mean(Primitive):
    name = "mean"

    def infer(self, x, axis=None, keepdims=False):
        return _reduced(x, axis, keepdims)

    def forward(self, x, axis=None, keepdims=False):
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), x.shape

    def backward(self, shape, g, axis=None, keepdims=False):
        axes = _norm_axes(axis, len(shape))
        count = math.prod(shape[a] for a in axes)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / g.dtype.type(count), shape).copy(),)


@register
class Softmax(Primitive):
    name = "softmax"

    def infer(self, x, axis=-1):
        return x

    def forward(self, x, axis=-1):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        y = e / e.sum(axis=axis, keepdims=True)
        return y, y

    def backward(self, y, g, axis=-1):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)


# -- dense algebra -----------------------------------------------------------


@register
class Matmul(Primitive):
    """Batched matrix product with numpy broadcasting over leading dims."""

    name = "matmul"

    def infer(self, a, b):
        if len(a) < 2 or len(b) < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a} and {b}")
        if a[-1] != b[-2]:
            raise ShapeError(f"inner dims differ: {a} @ {b}")
        return _broadcast(a[:-2], b[:-2]) + (a[-2], b[-1])

    def forward(self, a, b):
        return np.matmul(a, b), (a, b)

    def backward(self, saved, g):
        a, b = saved
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


@register
class Linear(Primitive):
    """x @ W (+ b) over the last axis. W has shape (in, out)."""

    name = "linear"

    def infer(self, x, w, b=None):
        if len(w) != 2 or x[-1] != w[0]:
            raise ShapeError(f"input features {x[-1]} do not match weight {w}")
        if b is not None and tuple(b) != (w[1],):
            raise ShapeError(f"bias {b} does not match weight {w}")
        return tuple(x[:-1]) + (w[1],)

    def forward(self, x, w, b=None):
        x2 = x.reshape(-1, x.shape[-1])
        y = x2 @ w
        if b is not None:
            y += b
        return y.reshape(x.shape[:-1] + (w.shape[1],)), (x2, w, x.shape, b is not None)

    def backward(self, saved, g):
        x2, w, shape, has_bias = saved
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.T).reshape(shape)
        gw = x2.T @ g2
        if has_bias:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


@register
class Conv2d(Primitive):
    """3x3, stride 1, zero 'same' padding. NHWC input, weight (3, 3, Cin, Cout)."""

    name = "conv2d"

    def infer(self, x, w, b=None):
        if len(x) != 4:
            raise ShapeError(f"conv2d expects NHWC input, got {x}")
        if len(w) != 4 or w[0] != 3 or w[1] != 3:
            raise ShapeError(f"conv2d expects a (3, 3, Cin, Cout) kernel, got {w}")
        if x[3] != w[2]:
            raise ShapeError(f"input has {x[3]} channels but kernel expects {w[2]}")
        if b is not None and tuple(b) != (w[3],):
            raise ShapeError(f"bias {b} does not match {w[3]} output channels")
        return (x[0], x[1], x[2], w[3])

    def forward(self, x, w, b=None):
        n, h, wd, cin = x.shape
        cout = w.shape[3]
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        out = np.zeros((n * h * wd, cout), dtype=np.result_type(x, w))
        for i in range(3):
            for j in range(3):
                patch = np.ascontiguousarray(xp[:, i : i + h, j : j + wd, :]).reshape(-1, cin)
                out += patch @ w[i, j]
        if b is not None:
            out += b
        return out.reshape(n, h, wd, cout), (xp, w, b is not None)

    def backward(self, saved, g):
        xp, w, has_bias = saved
        n, h, wd, cout = g.shape
        cin = w.shape[2]
        g2 = g.reshape(-1, cout)
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w)
        for i in range(3):
            for j in range(3):
                patch = np.ascontiguousarray(xp[:, i : i + h, j : j + wd, :]).reshape(-1, cin)
                gw[i, j] = patch.T @ g2
                gxp[:, i : i + h, j : j + wd, :] += (g2 @ w[i, j].T).reshape(n, h, wd, cin)
        gx = np.ascontiguousarray(gxp[:, 1:-1, 1:-1, :])
        if has_bias:
            return gx, gw, g2.sum(axis=0)
        return gx, gw


# -- normalization -----------------------------------------------------------


class BatchNormState:
    """Running statistics buffers, updated in place during training-mode forwards."""

    def __init__(self, mean, var, momentum=0.1):
        self.mean = mean
        self.var = var
        self.momentum = momentum


@register
class BatchNorm(Primitive):
    """Normalizes over every axis except the last (channel) axis."""

    name = "batch_norm"

    def infer(self, x, gamma, beta, state=None, training=True, eps=1e-5):
        c = x[-1]
        if tuple(gamma) != (c,) or tuple(beta) != (c,):
            raise ShapeError(f"affine params {gamma}, {beta} do not match {c} channels")
        return x

    def forward(self, x, gamma, beta, state=None, training=True, eps=1e-5):
        axes = tuple(range(x.ndim - 1))
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if state is not None:
                n = x.size // x.shape[-1]
                m = state.momentum
                state.mean[...] = (1 - m) * state.mean + m * mean
                state.var[...] = (1 - m) * state.var + m * var * (n / max(n - 1, 1))
        else:
            mean, var = state.mean.astype(x.dtype), state.var.astype(x.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        return (xhat * gamma + beta).astype(x.dtype, copy=False), (xhat, inv, gamma)

    def backward(self, saved, g, state=None, training=True, eps=1e-5):
        xhat, inv, gamma = saved
        axes = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma
        if training:
            n = g.size // g.shape[-1]
            gx = inv / n * (n * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx.astype(g.dtype, copy=False), ggamma, gbeta


@register
class LayerNorm(Primitive):
    name = "layer_norm"

    def infer(self, x, gamma, beta, eps=1e-5):
        if tuple(gamma) != (x[-1],) or tuple(beta) != (x[-1],):
            raise ShapeError(f"affine params {gamma}, {beta} do not match last dim {x[-1]}")
        return x

    def forward(self, x, gamma, beta, eps=1e-5):
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * inv
        return (xhat * gamma + beta).astype(x.dtype, copy=False), (xhat, inv, gamma)

    def backward(self, saved, g, eps=1e-5):
        xhat, inv, gamma = saved
        lead = tuple(range(g.ndim - 1))
        gbeta = g.sum(axis=lead)
        ggamma = (g * xhat).sum(axis=lead)
        gxhat = g * gamma
        n = g.shape[-1]
        gx = inv / n * (
            n * gxhat - gxhat.sum(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx.astype(g.dtype, copy=False), ggamma, gbeta


# -- image filters on the last two axes --------------------------------------


@register
class AvgPool2(Primitive):
    """2x average pooling over the last two axes; odd trailing rows/cols are dropped."""

    name = "avg_pool2"

    def infer(self, x):
        if len(x) < 2:
            raise ShapeError("avg_pool2 needs at least 2 dims")
        if x[-1] < 2 or x[-2] < 2:
            raise ShapeError(f"cannot pool spatial size {x[-2:]}")
        return tuple(x[:-2]) + (x[-2] // 2, x[-1] // 2)

    def forward(self, x):
        h, w = x.shape[-2] // 2, x.shape[-1] // 2
        xc = x[..., : 2 * h, : 2 * w]
        y = xc.reshape(x.shape[:-2] + (h, 2, w, 2)).mean(axis=(-3, -1))
        return y, x.shape

    def backward(self, shape, g):
        h, w = g.shape[-2], g.shape[-1]
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * g.dtype.type(0.25)
        out = np.zeros(shape, dtype=g.dtype)
        out[..., : 2 * h, : 2 * w] = up
        return (out,)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def _band_matrix(n, kernel):
    """Matrix K with (K @ v)[i] = sum_j kernel[j] * v[i + j] (valid correlation)."""
    size = len(kernel)
    m = np.zeros((n - size + 1, n))
    for i in range(n - size + 1):
        m[i, i : i + size] = kernel
    return m


@register
class GaussFilter(Primitive):
    """Separable Gaussian 'valid' filtering of the last two axes."""

    name = "gauss_filter"

    def infer(self, x, size=11, sigma=1.5):
        if len(x) < 2 or x[-2] < size or x[-1] < size:
            raise ShapeError(f"frame {x[-2:]} is smaller than the {size}x{size} window")
        return tuple(x[:-2]) + (x[-2] - size + 1, x[-1] - size + 1)

    def forward(self, x, size=11, sigma=1.5):
        k = gaussian_window(size, sigma)
        kh = _band_matrix(x.shape[-2], k).astype(x.dtype)
        kw = _band_matrix(x.shape[-1], k).astype(x.dtype)
        return kh @ x @ kw.T, (kh, kw)

    def backward(self, saved, g, size=11, sigma=1.5):
        kh, kw = saved
        return (kh.T @ g @ kw,)


# -- functional aliases ------------------------------------------------------


def add(a, b):
    return apply("add", a, b)


def sub(a, b):
    return apply("sub", a, b)


def mul(a, b):
    return apply("mul", a, b)


def div(a, b):
    return apply("div", a, b)


def scale(x, c):
    return apply("scale", x, c=float(c))


def relu(x):
    return apply("relu", x)


def gelu(x):
    return apply("gelu", x)


def absolute(x):
    return apply("abs", x)


def log(x):
    return apply("log", x)


def log10(x):
    return apply("log", x, base=10)


def clamp(x, lo=None, hi=None):
    return apply("clamp", x, lo=lo, hi=hi)


def masked_add(x, mask):
    return apply("masked_add", x, mask)


def dropout(x, rate=0.0, rng=None):
    return apply("dropout", x, rate=rate, rng=rng)


def reshape(x, shape):
    return apply("reshape", x, shape=tuple(shape))


def permute(x, axes):
    return apply("permute", x, axes=tuple(axes))


def concat(xs, axis=-1):
    return apply("concat", *xs, axis=axis)


def slice_(x, index):
    return apply("slice", x, index=index)


def pad(x, widths):
    return apply("pad", x, widths=tuple(tuple(w) for w in widths))


def roll(x, shifts, axes):
    return apply("roll", x, shifts=tuple(shifts), axes=tuple(axes))


def gather(table, index):
    return apply("gather", table, index=np.asarray(index))


def sum_(x, axis=None, keepdims=False):
    return apply("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", x, axis=axis, keepdims=keepdims)


def softmax(x, axis=-1):
    return apply("softmax", x, axis=axis)


def matmul(a, b):
    return apply("matmul", a, b)


def linear(x, w, b=None):
    if b is None:
        return apply("linear", x, w)
    return apply("linear", x, w, b)


def conv2d(x, w, b=None):
    if b is None:
        return apply("conv2d", x, w)
    return apply("conv2d", x, w, b)


def batch_norm(x, gamma, beta, state=None, training=True, eps=1e-5):
    return apply("batch_norm", x, gamma, beta, state=state, training=training, eps=eps)


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply("layer_norm", x, gamma, beta, eps=eps)


def avg_pool2(x):
    return apply("avg_pool2", x)


def gauss_filter(x, size=11, sigma=1.5):
    return apply("gauss_filter", x, size=size, sigma=sigma)
