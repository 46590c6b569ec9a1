"""Reconstruction Swin Transformer.

Layout: 2x4x4 patch partition -> linear embedding -> ``k`` backbone stages
(spatial 2x patch merging between them) -> ``k`` mirrored head stages (2x
patch expanding between them) -> per-token projection back to a 2x4x4xZ pixel
block. The standard variants use ``k = 4``.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .diffcore import ParamStore, Tensor, no_grad, trunc_normal
from .diffcore import ops as F
from .errors import ConfigError, ShapeError
from .swin3d import AttentionParams, WindowConfig, attention_param_shapes, sw_msa

PATCH = (2, 4, 4)
BASE_HEADS = 3
BASE_DIM = 96

VARIANTS = {
    "t": (96, (2, 2, 6, 2, 2, 6, 2, 2)),
    "s": (96, (2, 2, 18, 2, 2, 18, 2, 2)),
    "b": (128, (2, 2, 18, 2, 2, 18, 2, 2)),
    "l": (192, (2, 2, 18, 2, 2, 18, 2, 2)),
}


@dataclass(frozen=True)
class RstVariant:
    name: str = "t"
    embed_dim: int = 96
    blocks: tuple = (2, 2, 6, 2, 2, 6, 2, 2)
    heads: tuple = None
    window: tuple = (2, 4)
    mlp_ratio: int = 4
    channels: int = 1

    def __post_init__(self):
        if len(self.blocks) % 2 or not self.blocks:
            raise ConfigError(f"block list must have an even length (backbone + head), got {self.blocks}")
        k = self.n_stages
        if any(b < 1 for b in self.blocks):
            raise ConfigError(f"every stage needs at least one block: {self.blocks}")
        for s in range(k):
            if self.blocks[s] != self.blocks[2 * k - 1 - s]:
                raise ConfigError(f"head stages must mirror the backbone: {self.blocks}")
        if self.heads is None:
            base = max(1, round(BASE_HEADS * self.embed_dim / BASE_DIM))
            object.__setattr__(self, "heads", tuple(base * 2**s for s in range(k)))
        if len(self.heads) != k:
            raise ConfigError(f"need {k} head counts, got {self.heads}")
        for s, h in enumerate(self.heads):
            if self.stage_dim(s) % h:
                raise ConfigError(f"stage {s} width {self.stage_dim(s)} is not divisible by {h} heads")
        WindowConfig(self.window[0], self.window[1], shifted=True)

    @classmethod
    def get(cls, name, **overrides):
        name = name.lower()
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose one of {sorted(VARIANTS)}")
        dim, blocks = VARIANTS[name]
        base = cls(name=name, embed_dim=dim, blocks=blocks)
        if overrides:
            overrides.setdefault("heads", None)
            base = replace(base, **overrides)
        return base

    @property
    def n_stages(self):
        """Backbone stage count (the head has the same number)."""
        return len(self.blocks) // 2

    def stage_dim(self, stage):
        """Channel width of stage ``stage`` in ``0 .. 2k-1``."""
        k = self.n_stages
        level = stage if stage < k else 2 * k - 1 - stage
        return self.embed_dim * 2**level

    def stage_heads(self, stage):
        k = self.n_stages
        return self.heads[stage if stage < k else 2 * k - 1 - stage]

    @property
    def divisor(self):
        """Input (T, H, W) must be multiples of this (padding is applied otherwise)."""
        f = 2 ** (self.n_stages - 1)
        return (PATCH[0], PATCH[1] * f, PATCH[2] * f)

    @property
    def prefix(self):
        return f"rst.{self.name}"

    def to_dict(self):
        return {
            "name": self.name,
            "embed_dim": self.embed_dim,
            "blocks": list(self.blocks),
            "heads": list(self.heads),
            "window": list(self.window),
            "mlp_ratio": self.mlp_ratio,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            name=d["name"],
            embed_dim=int(d["embed_dim"]),
            blocks=tuple(d["blocks"]),
            heads=tuple(d["heads"]),
            window=tuple(d["window"]),
            mlp_ratio=int(d["mlp_ratio"]),
            channels=int(d["channels"]),
        )


def param_shapes(v):
    """Name -> shape for every RST parameter (nothing is allocated)."""
    shapes = {}
    pre = v.prefix
    patch_len = math.prod(PATCH) * v.channels
    shapes[f"{pre}.embed.weight"] = (patch_len, v.embed_dim)
    shapes[f"{pre}.embed.bias"] = (v.embed_dim,)
    k = v.n_stages
    table = (v.window[0], v.window[1], v.window[1])
    for s in range(2 * k):
        dim = v.stage_dim(s)
        hidden = v.mlp_ratio * dim
        for b in range(v.blocks[s]):
            p = f"{pre}.stage{s}.block{b}"
            shapes[f"{p}.norm1.weight"] = (dim,)
            shapes[f"{p}.norm1.bias"] = (dim,)
            for name, shape in attention_param_shapes(dim, v.stage_heads(s), table).items():
                shapes[f"{p}.attn.{name}"] = shape
            shapes[f"{p}.norm2.weight"] = (dim,)
            shapes[f"{p}.norm2.bias"] = (dim,)
            shapes[f"{p}.mlp.fc1.weight"] = (dim, hidden)
            shapes[f"{p}.mlp.fc1.bias"] = (hidden,)
            shapes[f"{p}.mlp.fc2.weight"] = (hidden, dim)
            shapes[f"{p}.mlp.fc2.bias"] = (dim,)
        if s < k - 1:
            shapes[f"{pre}.merge{s}.norm.weight"] = (4 * dim,)
            shapes[f"{pre}.merge{s}.norm.bias"] = (4 * dim,)
            shapes[f"{pre}.merge{s}.reduction.weight"] = (4 * dim, 2 * dim)
        elif k <= s < 2 * k - 1:
            shapes[f"{pre}.expand{s - k}.weight"] = (dim, 2 * dim)
    shapes[f"{pre}.restore.weight"] = (v.embed_dim, patch_len)
    shapes[f"{pre}.restore.bias"] = (patch_len,)
    return shapes


def count_params(v):
    return sum(math.prod(s) for s in param_shapes(v).values())


def init_params(v, seed=0, dtype=np.float32, store=None):
    """Truncated-normal(0.02) projections; zero biases and position bias; unit norm scales."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype) if store is None else store
    for name, shape in param_shapes(v).items():
        if name.endswith(("norm1.weight", "norm2.weight", "norm.weight")):
            value = np.ones(shape)
        elif name.endswith(("bias", "rel_bias")) or len(shape) == 1:
            value = np.zeros(shape)
        else:
            value = trunc_normal(rng, shape, 0.02)
        store.add(name, value)
    store.meta["rst"] = v.to_dict()
    return store


# -- building blocks ---------------------------------------------------------


def patch_partition(img):
    """``(B, T, H, W, Z)`` -> ``(B, T/2, H/4, W/4, 32*Z)``, features in (t, h, w, z) order."""
    x = img if isinstance(img, Tensor) else Tensor(np.asarray(img))
    if x.ndim != 5:
        raise ShapeError(f"expected (B, T, H, W, Z), got {x.shape}")
    b, t, h, w, z = x.shape
    pt, ph, pw = PATCH
    if t % pt or h % ph or w % pw:
        raise ShapeError(f"(T, H, W) = {(t, h, w)} is not divisible by the patch {PATCH}")
    x = x.reshape(b, t // pt, pt, h // ph, ph, w // pw, pw, z)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, t // pt, h // ph, w // pw, pt * ph * pw * z)


def patch_unpartition(tokens, channels):
    """Inverse of :func:`patch_partition`."""
    b, t, h, w, f = tokens.shape
    pt, ph, pw = PATCH
    if f != pt * ph * pw * channels:
        raise ShapeError(f"token length {f} does not match a {PATCH} patch with {channels} channels")
    x = tokens.reshape(b, t, h, w, pt, ph, pw, channels)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, t * pt, h * ph, w * pw, channels)


def linear_embed(tokens, weight, bias):
    return F.linear(tokens, weight, bias)


def patch_merging_down(grid, norm_w, norm_b, reduction_w):
    """Concatenate 2x2 spatial neighbours (4C), layer-norm, project to 2C. T' is untouched."""
    b, t, h, w, c = grid.shape
    if h % 2 or w % 2:
        grid = F.pad(grid, [(0, 0), (0, 0), (0, h % 2), (0, w % 2), (0, 0)])
        h, w = h + h % 2, w + w % 2
    x = grid.reshape(b, t, h // 2, 2, w // 2, 2, c)
    x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, t, h // 2, w // 2, 4 * c)
    x = F.layer_norm(x, norm_w, norm_b)
    return F.linear(x, reduction_w)


def patch_expand_up(grid, weight):
    """Project C -> 4 * (C/2) and unfold into a 2x2 spatial block of C/2-channel tokens."""
    b, t, h, w, c = grid.shape
    if c % 2:
        raise ConfigError(f"cannot expand an odd channel count {c}")
    x = F.linear(grid, weight)
    x = x.reshape(b, t, h, w, 2, 2, c // 2).permute(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(b, t, 2 * h, 2 * w, c // 2)


def rst_block(grid, params, prefix, heads, cfg, table_window):
    """x + SW-MSA(LN(x)), then + MLP(LN(.)) with a GELU hidden layer."""
    attn = AttentionParams.from_store(params, f"{prefix}.attn", heads, table_window)
    h = F.layer_norm(grid, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
    x = grid + sw_msa(h, attn, cfg)
    h = F.layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
    h = F.gelu(F.linear(h, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"]))
    h = F.linear(h, params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return x + h


def _stage(x, params, v, s, shift_windows=True):
    pre = v.prefix
    table = (v.window[0], v.window[1], v.window[1])
    for blk in range(v.blocks[s]):
        shifted = shift_windows and blk % 2 == 1
        cfg = WindowConfig(v.window[0], v.window[1], shifted)
        x = rst_block(x, params, f"{pre}.stage{s}.block{blk}", v.stage_heads(s), cfg, table)
    return x


def forward(img, params, v, clamp=False, shift_windows=True, trace=None):
    """``(B, T, H, W, Z)`` -> same shape. Inputs not divisible by ``v.divisor`` are zero-padded.

    ``clamp`` clips the output to [0, 1]; training uses the unclipped output.
    ``trace``, when a list, receives the token-grid shape after every stage.
    """
    x = img if isinstance(img, Tensor) else Tensor(np.asarray(img, dtype=params.dtype))
    if x.ndim != 5:
        raise ShapeError(f"expected (B, T, H, W, Z), got {x.shape}")
    if x.shape[-1] != v.channels:
        raise ShapeError(f"input has {x.shape[-1]} slices, variant expects {v.channels}")
    dims = x.shape[1:4]
    target = tuple(-(-d // q) * q for d, q in zip(dims, v.divisor))
    if target != dims:
        x = F.pad(x, [(0, 0)] + [(0, a - d) for d, a in zip(dims, target)] + [(0, 0)])
    pre = v.prefix
    k = v.n_stages
    x = linear_embed(patch_partition(x), params[f"{pre}.embed.weight"], params[f"{pre}.embed.bias"])
    for s in range(2 * k):
        x = _stage(x, params, v, s, shift_windows)
        if trace is not None:
            trace.append(tuple(x.shape[1:]))
        if s < k - 1:
            x = patch_merging_down(
                x, params[f"{pre}.merge{s}.norm.weight"], params[f"{pre}.merge{s}.norm.bias"],
                params[f"{pre}.merge{s}.reduction.weight"],
            )
        elif k <= s < 2 * k - 1:
            x = patch_expand_up(x, params[f"{pre}.expand{s - k}.weight"])
    x = F.linear(x, params[f"{pre}.restore.weight"], params[f"{pre}.restore.bias"])
    x = patch_unpartition(x, v.channels)
    if target != dims:
        x = x[:, : dims[0], : dims[1], : dims[2], :]
    if clamp:
        x = F.clamp(x, 0.0, 1.0)
    return x


def rst_forward(img, params, v):
    """Inference on one ``(T, H, W, Z)`` sequence; returns a clipped numpy array."""
    img = np.asarray(img)
    if img.ndim != 4:
        raise ShapeError(f"expected (T, H, W, Z), got {img.shape}")
    with no_grad():
        return forward(img[None].astype(params.dtype), params, v, clamp=True).data[0]
