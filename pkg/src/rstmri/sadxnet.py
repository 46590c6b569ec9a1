"""Seven-layer densely connected CNN for per-frame restoration.

Each layer is batch-norm -> ReLU -> 3x3 conv and consumes the channel
concatenation of the raw input and every earlier layer's output. Spatial size
never changes.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore import ParamStore, Tensor, no_grad
from .diffcore import ops as F
from .errors import ConfigError, ShapeError

N_LAYERS = 7
PREFIX = "sadxnet"


@dataclass(frozen=True)
class SadxConfig:
    channels: int = 1
    schedule: tuple = (16, 32, 64, 96, 64, 32)

    def __post_init__(self):
        sched = self.full_schedule
        if len(sched) != N_LAYERS:
            raise ConfigError(f"SADXNet has exactly {N_LAYERS} layers; schedule gives {len(sched)}")
        if any(c < 1 for c in sched):
            raise ConfigError(f"channel counts must be positive: {sched}")
        peak = int(np.argmax(sched[:-1]))
        hidden = sched[:-1]
        rising = all(a <= b for a, b in zip(hidden[:peak], hidden[1 : peak + 1]))
        falling = all(a >= b for a, b in zip(hidden[peak:], hidden[peak + 1 :]))
        if not (rising and falling and hidden[-1] >= sched[-1]):
            raise ConfigError(f"schedule must increase then decrease: {sched}")

    @property
    def full_schedule(self):
        """Output channels per layer; the last layer always maps back to Z."""
        return tuple(self.schedule) + (self.channels,)

    def in_channels(self, layer):
        """Input width of ``layer`` (0-based): the input plus all earlier outputs."""
        return self.channels + sum(self.full_schedule[:layer])

    def to_dict(self):
        return {"channels": self.channels, "schedule": list(self.schedule)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["channels"]), tuple(int(c) for c in d["schedule"]))


def init_params(cfg, seed=0, dtype=np.float32, store=None):
    """He-normal conv kernels, zero biases, unit BN scale; running stats at (0, 1)."""
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype) if store is None else store
    for i, cout in enumerate(cfg.full_schedule):
        cin = cfg.in_channels(i)
        p = f"{PREFIX}.layer{i}"
        store.add(f"{p}.bn.weight", np.ones(cin))
        store.add(f"{p}.bn.bias", np.zeros(cin))
        store.add(f"{p}.bn.running_mean", np.zeros(cin), trainable=False)
        store.add(f"{p}.bn.running_var", np.ones(cin), trainable=False)
        std = np.sqrt(2.0 / (9 * cin))
        store.add(f"{p}.conv.weight", rng.standard_normal((3, 3, cin, cout)) * std)
        store.add(f"{p}.conv.bias", np.zeros(cout))
    store.meta["sadxnet"] = cfg.to_dict()
    return store


def forward(x, params, cfg, training=False):
    """``(N, H, W, Z)`` tensor -> ``(N, H, W, Z)`` tensor (unclamped)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=params.dtype))
    if x.ndim != 4:
        raise ShapeError(f"expected (N, H, W, Z), got {x.shape}")
    if x.shape[-1] != cfg.channels:
        raise ShapeError(f"input has {x.shape[-1]} channels, config expects {cfg.channels}")
    if x.shape[1] < 3 or x.shape[2] < 3:
        raise ShapeError(f"frames must be at least 3x3, got {x.shape[1:3]}")
    features = [x]
    out = None
    for i in range(N_LAYERS):
        p = f"{PREFIX}.layer{i}"
        h = features[0] if len(features) == 1 else F.concat(features, axis=-1)
        h = F.batch_norm(
            h, params[f"{p}.bn.weight"], params[f"{p}.bn.bias"], state=params.bn_state(f"{p}.bn"), training=training
        )
        h = F.relu(h)
        out = F.conv2d(h, params[f"{p}.conv.weight"], params[f"{p}.conv.bias"])
        features.append(out)
    return out


def sadxnet_forward(frame, params, cfg):
    """Inference on one ``(H, W, Z)`` frame; returns a numpy array of the same shape."""
    frame = np.asarray(frame)
    if frame.ndim != 3:
        raise ShapeError(f"expected (H, W, Z), got {frame.shape}")
    with no_grad():
        return forward(frame[None], params, cfg, training=False).data[0]


def restore_sequence(img, params, cfg, batch=1):
    """Restore each frame of ``(T, H, W, Z)`` independently; output clipped to [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 4:
        raise ShapeError(f"expected (T, H, W, Z), got {img.shape}")
    out = np.empty(img.shape, dtype=params.dtype)
    with no_grad():
        for s in range(0, img.shape[0], batch):
            # inference-mode BN: each frame's output is independent of its batch mates
            out[s : s + batch] = forward(img[s : s + batch], params, cfg, training=False).data
    return np.clip(out, 0.0, 1.0)
