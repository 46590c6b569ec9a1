"""Central finite-difference verification of backward kernels.

Relative error of one gradient array is ``max|a - n| / max(max|a|, max|n|)``
over the checked coordinates, where ``a`` is the analytic and ``n`` the
numerical gradient. Normalizing per array (rather than per entry) keeps
near-zero entries from dominating the score.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .engine import Tensor
from .ops import BatchNormState


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    passed: bool
    trials: int
    tol: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op:<24} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:g}, {self.trials} trials)"


def rel_error(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def check_function(build, leaves, h=1e-4, rng=None, max_coords=None, projection=None, pooled=False):
    """Compare analytic and numerical gradients of ``sum(build() * projection)``.

    ``build`` is a zero-argument callable that constructs the graph from the
    leaf tensors in ``leaves``. A random projection is drawn when none is
    given so the checked scalar mixes every output entry. At most
    ``max_coords`` coordinates per leaf are probed (all when ``None``).

    Errors are normalized per leaf unless ``pooled``, in which case all probed
    coordinates form one vector. Pooling suits whole networks, where some
    leaves have an exactly zero gradient (a bias feeding batch norm) and a
    per-leaf ratio would compare rounding noise with rounding noise.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in leaves:
        t.requires_grad = True
        t.grad = None
    out = build()
    if projection is None:
        projection = rng.standard_normal(out.shape)
    out.backward(np.asarray(projection, dtype=out.dtype))

    def loss():
        return float(np.sum(build().data * projection))

    worst = 0.0
    pool_a, pool_n = [], []
    for t in leaves:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        numeric = np.empty(len(coords))
        for k, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + h
            plus = loss()
            flat[i] = orig - h
            minus = loss()
            flat[i] = orig
            numeric[k] = (plus - minus) / (2 * h)
        if pooled:
            pool_a.append(analytic.reshape(-1)[coords])
            pool_n.append(numeric)
        else:
            worst = max(worst, rel_error(analytic.reshape(-1)[coords], numeric))
    if pooled:
        return rel_error(np.concatenate(pool_a), np.concatenate(pool_n))
    return worst


def _away(rng, shape, lo=0.1, hi=1.0):
    """Uniform magnitudes in [lo, hi] with random signs (keeps clear of kinks at 0)."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _bn_state(c):
    return BatchNormState(np.zeros(c), np.ones(c))


def _bn_eval_state(rng, c):
    return BatchNormState(rng.standard_normal(c) * 0.1, rng.uniform(0.5, 1.5, c))


# Each case maps rng -> (inputs, fn). ``fn`` receives Tensors in input order.
CASES = {
    "add": lambda r: ([r.standard_normal((3, 4)), r.standard_normal((4,))], lambda a, b: a + b),
    "sub": lambda r: ([r.standard_normal((2, 3, 4)), r.standard_normal((2, 1, 4))], lambda a, b: a - b),
    "mul": lambda r: ([r.standard_normal((3, 4)), r.standard_normal((3, 4))], lambda a, b: a * b),
    "div": lambda r: ([r.standard_normal((3, 4)), _away(r, (3, 4), 0.5, 1.5)], lambda a, b: a / b),
    "scale": lambda r: ([r.standard_normal((5,))], lambda a: a * 1.7),
    "relu": lambda r: ([_away(r, (4, 5))], lambda a: ops.relu(a)),
    "gelu": lambda r: ([r.standard_normal((4, 5)) * 2], lambda a: ops.gelu(a)),
    "abs": lambda r: ([_away(r, (4, 5))], lambda a: ops.absolute(a)),
    "log": lambda r: ([r.uniform(0.5, 2.0, (4, 5))], lambda a: ops.log(a)),
    "clamp": lambda r: (
        [np.where(r.random((4, 5)) < 0.5, r.uniform(-0.4, 0.4, (4, 5)), _away(r, (4, 5), 0.6, 1.0))],
        lambda a: ops.clamp(a, -0.5, 0.5),
    ),
    "masked_add": lambda r: (
        [r.standard_normal((2, 3, 3))],
        lambda a, m=np.where(r.random((3, 3)) < 0.3, -30.0, 0.0): ops.masked_add(a, m),
    ),
    "dropout": lambda r: ([r.standard_normal((3, 4))], lambda a: ops.dropout(a, 0.0)),
    "reshape": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: a.reshape(4, 6)),
    "permute": lambda r: ([r.standard_normal((2, 3, 4))], lambda a: a.permute(2, 0, 1)),
    "concat": lambda r: (
        [r.standard_normal((2, 3, 1)), r.standard_normal((2, 3, 4)), r.standard_normal((2, 3, 2))],
        lambda a, b, c: ops.concat([a, b, c], axis=-1),
    ),
    "slice": lambda r: ([r.standard_normal((4, 5))], lambda a: a[1:3, ::2]),
    "pad": lambda r: ([r.standard_normal((2, 3))], lambda a: ops.pad(a, ((1, 0), (2, 1)))),
    "roll": lambda r: ([r.standard_normal((3, 4, 5))], lambda a: ops.roll(a, (1, -2), (0, 2))),
    "gather": lambda r: (
        [r.standard_normal((5, 2))],
        lambda a, idx=r.integers(0, 5, (3, 4)): ops.gather(a, idx),
    ),
    "sum": lambda r: ([r.standard_normal((3, 4, 2))], lambda a: a.sum(axis=1)),
    "mean": lambda r: ([r.standard_normal((3, 4, 2))], lambda a: a.mean(axis=(0, 2))),
    "softmax": lambda r: ([r.standard_normal((3, 6))], lambda a: ops.softmax(a)),
    "matmul": lambda r: (
        [r.standard_normal((2, 3, 4, 5)), r.standard_normal((3, 5, 2))],
        lambda a, b: a @ b,
    ),
    "linear": lambda r: (
        [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5)), r.standard_normal((5,))],
        lambda x, w, b: ops.linear(x, w, b),
    ),
    "conv2d": lambda r: (
        [r.standard_normal((2, 5, 6, 3)), r.standard_normal((3, 3, 3, 4)), r.standard_normal((4,))],
        lambda x, w, b: ops.conv2d(x, w, b),
    ),
    "batch_norm": lambda r: (
        [r.standard_normal((3, 4, 4, 3)) * 2 + 1, r.uniform(0.5, 1.5, (3,)), r.standard_normal((3,))],
        lambda x, g, b, s=_bn_state(3): ops.batch_norm(x, g, b, state=s, training=True),
    ),
    "batch_norm[inference]": lambda r: (
        [r.standard_normal((3, 4, 4, 3)), r.uniform(0.5, 1.5, (3,)), r.standard_normal((3,))],
        lambda x, g, b, s=_bn_eval_state(r, 3): ops.batch_norm(x, g, b, state=s, training=False),
    ),
    "layer_norm": lambda r: (
        [r.standard_normal((3, 2, 6)), r.uniform(0.5, 1.5, (6,)), r.standard_normal((6,))],
        lambda x, g, b: ops.layer_norm(x, g, b),
    ),
    "avg_pool2": lambda r: ([r.standard_normal((2, 5, 7))], lambda a: ops.avg_pool2(a)),
    "gauss_filter": lambda r: ([r.standard_normal((2, 13, 14))], lambda a: ops.gauss_filter(a)),
}


def grad_check(op, trials=10, h=1e-4, tol=1e-4, seed=0):
    """Finite-difference check of one primitive over ``trials`` random instances."""
    if op not in CASES:
        raise KeyError(f"no gradient-check case for primitive {op!r}")
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        arrays, fn = CASES[op](rng)
        leaves = [Tensor(np.array(a, dtype=np.float64)) for a in arrays]
        err = check_function(lambda: fn(*leaves), leaves, h=h, rng=rng)
        worst = max(worst, err)
    return GradCheckReport(op, worst, worst < tol, trials, tol)


def grad_check_all(trials=10, h=1e-4, tol=1e-4, seed=0):
    return [grad_check(op, trials, h, tol, seed) for op in CASES]
