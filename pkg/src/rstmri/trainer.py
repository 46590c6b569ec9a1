"""Two-stage training: SADXNet on frame pairs, then RST on whole sequences."""

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from threadpoolctl import threadpool_limits

from . import rst, sadxnet
from .diffcore import AdamState, Tensor, load_checkpoint, no_grad, save_checkpoint
from .diffcore import ops as F
from .errors import ConfigError, DivergenceError, ShapeError, StateError
from .kspace import dft2_frames, make_vista_mask, undersample, zero_filled_recon
from .metrics import LossWeights, SsimParams, composite_loss_t, sequence_report
from .phantom import PhantomSpec, generate_cine

log = logging.getLogger(__name__)

CLIP_NORM = 1.0


# -- optimizer ---------------------------------------------------------------


def adam_step(store, lr, clip_norm=None):
    """One bias-corrected Adam update over trainable entries, in sorted-name order.

    Returns the global gradient norm measured before clipping.
    """
    if store.adam is None:
        store.adam = AdamState()
    state = store.adam
    entries = store.entries(trainable=True)
    for e in entries:
        if e.grad is None:
            raise StateError(f"{e.name}: no gradient; run backward() before adam_step()")
    norm = store.global_grad_norm()
    factor = 1.0
    if clip_norm is not None and norm > clip_norm:
        factor = clip_norm / (norm + 1e-6)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for e in entries:
        g = e.grad if factor == 1.0 else e.grad * e.grad.dtype.type(factor)
        m = state.m.get(e.name)
        if m is None:
            m = state.m[e.name] = np.zeros_like(e.value)
            state.v[e.name] = np.zeros_like(e.value)
        v = state.v[e.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + state.eps)
        e.value[...] = e.value - lr * step
    return norm


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    rotate: bool = False
    max_angle: float = 10.0
    resize: bool = False
    scale_range: tuple = (0.8, 1.2)
    crop: bool = False
    crop_size: tuple = None
    flip: bool = False
    blur: bool = False
    blur_sigma: tuple = (0.0, 1.0)
    prob: float = 0.5

    @classmethod
    def for_stage(cls, stage):
        if stage == "sadxnet":
            return cls(rotate=True, resize=True, crop=True, blur=True)
        if stage == "rst":
            return cls(resize=True, crop=True, flip=True)
        raise ConfigError(f"unknown stage {stage!r}")

    @classmethod
    def disabled(cls):
        return cls()


@dataclass(frozen=True)
class AugmentPlan:
    blur_sigma: float = 0.0
    quarter_turns: int = 0
    angle: float = 0.0
    scale: float = 1.0
    out_size: tuple = None
    offset: tuple = (0, 0)
    flip_h: bool = False
    flip_w: bool = False


def plan_augmentation(hw, stage, seed, cfg=None):
    """Draw every random choice for one augmentation from ``seed``."""
    cfg = AugmentConfig.for_stage(stage) if cfg is None else cfg
    rng = np.random.default_rng(seed)
    h, w = hw
    out = tuple(cfg.crop_size) if cfg.crop_size else (h, w)
    if out[0] > h or out[1] > w:
        raise ConfigError(f"crop {out} is larger than the {h}x{w} image")
    on = lambda: rng.random() < cfg.prob  # noqa: E731
    sigma = float(rng.uniform(*cfg.blur_sigma)) if cfg.blur and stage == "sadxnet" and on() else 0.0
    turns = int(rng.integers(4)) if cfg.rotate and on() else 0
    angle = float(rng.uniform(-cfg.max_angle, cfg.max_angle)) if cfg.rotate and on() else 0.0
    scale = float(rng.uniform(*cfg.scale_range)) if cfg.resize and on() else 1.0
    size = (int(round(h * scale)), int(round(w * scale)))
    if cfg.crop:
        offset = tuple(int(rng.integers(-abs(s - o), abs(s - o) + 1)) if s != o else 0 for s, o in zip(size, out))
    else:
        offset = tuple((s - o) // 2 for s, o in zip(size, out))
    flip_h = bool(cfg.flip and rng.random() < 0.5)
    flip_w = bool(cfg.flip and rng.random() < 0.5)
    return AugmentPlan(sigma, turns, angle, scale, out, offset, flip_h, flip_w)


def _fit(x, axes, size, offset):
    """Crop (or zero-pad) spatial axes to ``size``; ``offset`` places the window."""
    for ax, n, off in zip(axes, size, offset):
        cur = x.shape[ax]
        if cur > n:
            start = min(max(abs(off), 0), cur - n)
            x = np.take(x, np.arange(start, start + n), axis=ax)
        elif cur < n:
            before = min(abs(off), n - cur)
            widths = [(0, 0)] * x.ndim
            widths[ax] = (before, n - cur - before)
            x = np.pad(x, widths)
    return x


def apply_geometry(x, plan, axes):
    """The geometric part of ``plan`` on array ``x`` whose spatial axes are ``axes``."""
    if plan.quarter_turns:
        x = np.rot90(x, plan.quarter_turns, axes=axes)
    if plan.angle:
        x = ndimage.rotate(x, plan.angle, axes=axes, reshape=False, order=1, mode="constant")
    if plan.scale != 1.0:
        zoom = [1.0] * x.ndim
        h, w = x.shape[axes[0]], x.shape[axes[1]]
        zoom[axes[0]] = round(h * plan.scale) / h
        zoom[axes[1]] = round(w * plan.scale) / w
        x = ndimage.zoom(x, zoom, order=1, grid_mode=True, mode="grid-constant")
    x = _fit(x, axes, plan.out_size or (x.shape[axes[0]], x.shape[axes[1]]), plan.offset)
    if plan.flip_h:
        x = np.flip(x, axis=axes[0])
    if plan.flip_w:
        x = np.flip(x, axis=axes[1])
    return np.ascontiguousarray(x)


def apply_blur(x, sigma, axes):
    if sigma <= 0:
        return x
    sig = [0.0] * x.ndim
    for a in axes:
        sig[a] = sigma
    return ndimage.gaussian_filter(x, sig, mode="nearest")


def _spatial_axes(x):
    if x.ndim == 3:
        return (0, 1)
    if x.ndim == 4:
        return (1, 2)
    raise ShapeError(f"expected an (H, W, Z) frame or (T, H, W, Z) sequence, got {x.shape}")


def augment_pair(inp, target, stage, seed, cfg=None):
    """Apply one random geometric transform to both arrays; blur only the SADXNet input."""
    inp, target = np.asarray(inp), np.asarray(target)
    if inp.shape != target.shape:
        raise ShapeError(f"input {inp.shape} and target {target.shape} are not aligned")
    axes = _spatial_axes(inp)
    plan = plan_augmentation((inp.shape[axes[0]], inp.shape[axes[1]]), stage, seed, cfg)
    a = apply_geometry(apply_blur(inp, plan.blur_sigma, axes), plan, axes)
    b = apply_geometry(target, plan, axes)
    return a.astype(inp.dtype, copy=False), b.astype(target.dtype, copy=False)


# -- data ----------------------------------------------------------------------


@dataclass
class Sample:
    truth: np.ndarray
    zero_filled: np.ndarray
    mask: np.ndarray
    name: str = ""


def make_sample(spec, r, mask_seed, name=""):
    truth = generate_cine(spec)
    t, h, w, _ = truth.shape
    mask = make_vista_mask(t, h, w, r, mask_seed)
    zf = zero_filled_recon(undersample(dft2_frames(truth), mask))
    return Sample(truth, zf.astype(np.float32), mask, name)


def make_dataset(n, r, seed, frames=8, height=32, width=32, slices=1, **phantom_kw):
    """``n`` phantoms undersampled at acceleration ``r``; phantom and mask seeds derive from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(2 * n, dtype=np.uint64)
    phantom_kw.setdefault("period_frames", float(frames))
    out = []
    for i in range(n):
        spec = PhantomSpec(
            frames=frames, height=height, width=width, slices=slices, seed=int(seeds[2 * i]), **phantom_kw
        )
        out.append(make_sample(spec, r, int(seeds[2 * i + 1]), name=f"phantom{i:03d}"))
    return out


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: str = "sadxnet"
    lr: float = 0.001
    batch_size: int = None
    steps: int = 500
    seed: int = 0
    augment: bool = True
    alpha: float = 0.5
    beta: float = 0.5
    variant: str = "t"
    embed_dim: int = None
    blocks: tuple = None
    window: tuple = (2, 4)
    schedule: tuple = (16, 32, 64, 96, 64, 32)
    checkpoint: str = None
    eval_interval: int = 0
    strict: bool = False
    ssim_scales: int = 3
    acceleration: float = 4.0
    clip_norm: float = CLIP_NORM
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in ("sadxnet", "rst"):
            raise ConfigError(f"stage must be 'sadxnet' or 'rst', got {self.stage!r}")
        if self.batch_size is None:
            self.batch_size = 2 if self.stage == "sadxnet" else 1
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be >= 1")
        LossWeights(self.alpha, self.beta)

    @classmethod
    def from_json(cls, path, **overrides):
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        for key in ("blocks", "window", "schedule"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def rst_variant(self, channels=1):
        overrides = {"window": tuple(self.window), "channels": channels}
        if self.embed_dim is not None:
            overrides["embed_dim"] = self.embed_dim
        if self.blocks is not None:
            overrides["blocks"] = tuple(self.blocks)
        return rst.RstVariant.get(self.variant, **overrides)

    def sadx_config(self, channels=1):
        return sadxnet.SadxConfig(channels, tuple(self.schedule))


@dataclass
class TrainResult:
    params: object
    config: object
    losses: list
    checkpoint: Path = None


@contextlib.contextmanager
def strict_mode(enabled=True):
    """Single-threaded BLAS so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _frames(t):
    """(N, H, W, Z) or (B, T, H, W, Z) tensor -> (frames, H, W) for the loss."""
    if t.ndim == 4:
        n, h, w, z = t.shape
        return t.permute(0, 3, 1, 2).reshape(n * z, h, w)
    b, tt, h, w, z = t.shape
    return t.permute(0, 1, 4, 2, 3).reshape(b * tt * z, h, w)


def _loss(pred, target, cfg, hw):
    params = SsimParams(scales=cfg.ssim_scales).fit(*hw)
    return composite_loss_t(_frames(pred), _frames(target), LossWeights(cfg.alpha, cfg.beta), params)


def _checkpoint(store, cfg, step, losses):
    if not cfg.checkpoint:
        return None
    root = Path(cfg.checkpoint)
    save_checkpoint(store, root, extra={"model": cfg.stage, "step": step, "train_config": _jsonable(cfg)})
    write_loss_csv(root / "loss.csv", losses)
    return root


def _jsonable(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def write_loss_csv(path, losses):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def _train_loop(store, cfg, draw_batch, forward, hw):
    losses = []
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    with strict_mode(cfg.strict):
        for step in range(cfg.steps):
            x, y = draw_batch(rng, step)
            store.zero_grad()
            pred = forward(Tensor(x))
            loss = _loss(pred, Tensor(y), cfg, hw)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"{cfg.stage}: loss became {value} at step {step}")
            loss.backward()
            adam_step(store, cfg.lr, cfg.clip_norm)
            losses.append(value)
            if cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
                _checkpoint(store, cfg, step + 1, losses)
                log.info("%s step %d loss %.5f", cfg.stage, step + 1, value)
    return losses


def train_sadxnet(cfg, data, params=None):
    """Fit SADXNet on (zero-filled frame, truth frame) pairs drawn from ``data``."""
    if cfg.stage != "sadxnet":
        raise ConfigError("train_sadxnet needs a config with stage='sadxnet'")
    if not data:
        raise ConfigError("no training data")
    z = data[0].truth.shape[-1]
    scfg = cfg.sadx_config(z)
    store = sadxnet.init_params(scfg, seed=cfg.seed) if params is None else params
    pairs = [(s.zero_filled[t], s.truth[t]) for s in data for t in range(s.truth.shape[0])]
    hw = pairs[0][0].shape[:2]
    aug = AugmentConfig.for_stage("sadxnet") if cfg.augment else AugmentConfig.disabled()

    def draw(rng, step):
        idx = rng.integers(len(pairs), size=cfg.batch_size)
        xs, ys = [], []
        for j, i in enumerate(idx):
            a, b = pairs[i]
            if cfg.augment:
                a, b = augment_pair(a, b, "sadxnet", [cfg.seed, step, j], aug)
            xs.append(a)
            ys.append(b)
        return np.stack(xs).astype(store.dtype), np.stack(ys).astype(store.dtype)

    losses = _train_loop(store, cfg, draw, lambda x: sadxnet.forward(x, store, scfg, training=True), hw)
    ckpt = _checkpoint(store, cfg, cfg.steps, losses)
    return TrainResult(store, scfg, losses, ckpt)


def rst_inputs(data, sadx=None):
    """Per-sequence RST inputs: SADXNet-restored when ``sadx = (params, cfg)`` is given."""
    if sadx is None:
        return [s.zero_filled for s in data]
    params, scfg = sadx
    return [sadxnet.restore_sequence(s.zero_filled, params, scfg) for s in data]


def train_rst(cfg, data, sadx=None, params=None):
    """Fit RST on whole sequences. ``sadx = (params, cfg)`` freezes SADXNet as a pre-stage."""
    if cfg.stage != "rst":
        raise ConfigError("train_rst needs a config with stage='rst'")
    if not data:
        raise ConfigError("no training data")
    z = data[0].truth.shape[-1]
    v = cfg.rst_variant(z)
    store = rst.init_params(v, seed=cfg.seed) if params is None else params
    inputs = rst_inputs(data, sadx)
    hw = data[0].truth.shape[1:3]
    aug = AugmentConfig.for_stage("rst") if cfg.augment else AugmentConfig.disabled()

    def draw(rng, step):
        idx = rng.integers(len(data), size=cfg.batch_size)
        xs, ys = [], []
        for j, i in enumerate(idx):
            a, b = inputs[i], data[i].truth
            if cfg.augment:
                a, b = augment_pair(a, b, "rst", [cfg.seed, step, j], aug)
            xs.append(a)
            ys.append(b)
        return np.stack(xs).astype(store.dtype), np.stack(ys).astype(store.dtype)

    losses = _train_loop(store, cfg, draw, lambda x: rst.forward(x, store, v), hw)
    ckpt = _checkpoint(store, cfg, cfg.steps, losses)
    return TrainResult(store, v, losses, ckpt)


# -- inference and evaluation ------------------------------------------------


def reconstruct(zero_filled, sadx=None, rst_model=None):
    """Apply SADXNet and/or RST to a ``(T, H, W, Z)`` zero-filled sequence."""
    x = np.asarray(zero_filled, dtype=np.float32)
    if sadx is not None:
        params, scfg = sadx
        x = sadxnet.restore_sequence(x, params, scfg)
    if rst_model is not None:
        params, v = rst_model
        x = rst.rst_forward(x, params, v)
    return x


def load_model(path):
    """Rebuild a SADXNet or RST model from a checkpoint directory."""
    from .diffcore import ParamStore, read_manifest

    manifest = read_manifest(path)
    meta = manifest.get("meta", {})
    if "sadxnet" in meta:
        scfg = sadxnet.SadxConfig.from_dict(meta["sadxnet"])
        store = ParamStore(np.float32)
        # shapes only; values are overwritten by the checkpoint
        sadxnet.init_params(scfg, store=store)
        load_checkpoint(store, path)
        return "sadxnet", (store, scfg)
    if "rst" in meta:
        v = rst.RstVariant.from_dict(meta["rst"])
        store = rst.init_params(v)
        load_checkpoint(store, path)
        return "rst", (store, v)
    raise ConfigError(f"{path}: checkpoint manifest names no known model")


def _aggregate(rows, key):
    out = {}
    for metric in ("rmse", "psnr_db", "one_minus_ssim", "ms_ssim", "time_s"):
        vals = [r[key][metric] for r in rows if metric in r[key]]
        if vals:
            out[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


def evaluate(data, sadx=None, rst_model=None, label="model"):
    """Zero-filled baseline and model metrics per sequence, with mean/std aggregates."""
    rows = []
    for s in data:
        start = time.perf_counter()
        pred = reconstruct(s.zero_filled, sadx, rst_model)
        elapsed = time.perf_counter() - start
        zf = sequence_report(s.zero_filled, s.truth)
        model = sequence_report(pred, s.truth)
        model["time_s"] = elapsed
        rows.append({"name": s.name, "zero_filled": zf, label: model})
    return {
        "label": label,
        "sequences": rows,
        "aggregate": {"zero_filled": _aggregate(rows, "zero_filled"), label: _aggregate(rows, label)},
    }


# -- desk-scale experiment -----------------------------------------------------


@dataclass
class ExperimentConfig:
    n_train: int = 8
    n_test: int = 4
    frames: int = 8
    height: int = 32
    width: int = 32
    acceleration: float = 4.0
    seed: int = 2024
    sadx_steps: int = 500
    rst_steps: int = 1000
    embed_dim: int = 24
    blocks: tuple = (1, 1, 2, 1, 1, 2, 1, 1)
    window: tuple = (2, 4)
    lr: float = 0.001
    augment: bool = True
    strict: bool = True
    out_dir: str = None


@dataclass
class ExperimentResult:
    report: dict
    sadx: TrainResult
    rst: TrainResult
    train: list
    test: list
    timings: dict


def run_experiment(cfg=ExperimentConfig()):
    """Phantoms -> undersampling -> SADXNet -> frozen SADXNet + RST -> held-out evaluation."""
    timings = {}
    t0 = time.perf_counter()
    data = make_dataset(cfg.n_train + cfg.n_test, cfg.acceleration, cfg.seed, cfg.frames, cfg.height, cfg.width)
    train, test = data[: cfg.n_train], data[cfg.n_train :]
    timings["data_s"] = time.perf_counter() - t0
    out = Path(cfg.out_dir) if cfg.out_dir else None

    t0 = time.perf_counter()
    scfg = TrainConfig(
        stage="sadxnet", lr=cfg.lr, steps=cfg.sadx_steps, seed=cfg.seed, augment=cfg.augment, strict=cfg.strict,
        checkpoint=str(out / "sadxnet") if out else None,
    )
    sadx = train_sadxnet(scfg, train)
    timings["sadxnet_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    rcfg = TrainConfig(
        stage="rst", lr=cfg.lr, steps=cfg.rst_steps, seed=cfg.seed, augment=cfg.augment, strict=cfg.strict,
        embed_dim=cfg.embed_dim, blocks=tuple(cfg.blocks), window=tuple(cfg.window),
        checkpoint=str(out / "rst") if out else None,
    )
    sadx_model = (sadx.params, sadx.config)
    rst_res = train_rst(rcfg, train, sadx=sadx_model)
    timings["rst_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    report = evaluate(test, sadx_model, (rst_res.params, rst_res.config), label="sadxnet+rst")
    timings["eval_s"] = time.perf_counter() - t0
    if out:
        (out / "report.json").write_text(json.dumps(report, indent=2))
    return ExperimentResult(report, sadx, rst_res, train, test, timings)
