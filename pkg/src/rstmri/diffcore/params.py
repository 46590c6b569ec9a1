"""Named parameter storage, initializers and the checkpoint container."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import dmt4
from ..errors import FormatError, ShapeError, StateError
from .engine import Tensor
from .ops import BatchNormState


@dataclass
class Entry:
    name: str
    tensor: Tensor
    trainable: bool = True

    @property
    def value(self):
        return self.tensor.data

    @property
    def grad(self):
        return self.tensor.grad


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class ParamStore:
    """Ordered-by-name collection of parameters plus non-trainable buffers.

    Buffers (batch-norm running statistics) are stored as entries with
    ``trainable=False``; they never receive gradients or optimizer updates.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._entries = {}
        self.adam = None
        self._bn = {}
        self.meta = {}

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._entries[name] = Entry(name, Tensor(arr, requires_grad=trainable, name=name), trainable)
        return self._entries[name].tensor

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self._entries[name].tensor

    def __len__(self):
        return len(self._entries)

    def names(self, trainable=None):
        keys = sorted(self._entries)
        if trainable is None:
            return keys
        return [k for k in keys if self._entries[k].trainable == trainable]

    def entries(self, trainable=None):
        return [self._entries[k] for k in self.names(trainable)]

    def entry(self, name):
        return self._entries[name]

    def count(self, trainable=True):
        return sum(e.value.size for e in self.entries(trainable))

    def bn_state(self, prefix, momentum=0.1):
        """Running-stat view over ``prefix.running_mean`` / ``prefix.running_var``."""
        state = self._bn.get(prefix)
        if state is None:
            state = BatchNormState(
                self[prefix + ".running_mean"].data, self[prefix + ".running_var"].data, momentum
            )
            self._bn[prefix] = state
        return state

    def zero_grad(self):
        for e in self.entries(trainable=True):
            e.tensor.grad = np.zeros_like(e.value)

    def set_trainable(self, flag):
        for e in self._entries.values():
            if not e.name.endswith((".running_mean", ".running_var")):
                e.trainable = flag
                e.tensor.requires_grad = flag

    def state_dict(self):
        return {k: e.value.copy() for k, e in sorted(self._entries.items())}

    def load_state_dict(self, arrays, strict=True):
        for name, arr in arrays.items():
            if name not in self._entries:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            cur = self._entries[name].value
            if cur.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {cur.shape}")
            cur[...] = arr
        if strict:
            missing = set(self._entries) - set(arrays)
            if missing:
                raise KeyError(f"checkpoint lacks parameters {sorted(missing)}")

    def astype(self, dtype):
        """A copy of this store in another precision (used for double-precision checks)."""
        out = ParamStore(dtype)
        for e in self.entries():
            out.add(e.name, e.value, e.trainable)
        out.meta = dict(self.meta)
        return out

    def global_grad_norm(self):
        total = 0.0
        for e in self.entries(trainable=True):
            if e.grad is None:
                raise StateError(f"{e.name}: gradient missing")
            total += float(np.sum(e.grad.astype(np.float64) ** 2))
        return total**0.5


def trunc_normal(rng, shape, std=0.02, bound=2.0):
    """Normal(0, std) resampled until every draw lies within +-bound*std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"


def _tensor_file(name, suffix=""):
    return f"{name}{suffix}.dmt4"


def save_checkpoint(store, path, extra=None):
    """Write ``store`` as a directory: one DMT4 file per tensor plus a JSON manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"meta": {**store.meta, **(extra or {})}, "tensors": {}}
    adam = store.adam
    for e in store.entries():
        dmt4.write(root / _tensor_file(e.name), e.value.astype(np.float32))
        has_adam = adam is not None and e.name in adam.m
        if has_adam:
            dmt4.write(root / _tensor_file(e.name, ".adam_m"), adam.m[e.name].astype(np.float32))
            dmt4.write(root / _tensor_file(e.name, ".adam_v"), adam.v[e.name].astype(np.float32))
        manifest["tensors"][e.name] = {
            "dims": list(e.value.shape),
            "dtype": "float32",
            "trainable": e.trainable,
            "adam": has_adam,
        }
    if adam is not None:
        manifest["adam"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_manifest(path):
    root = Path(path)
    try:
        return json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{root} has no {MANIFEST}", 0) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None


def load_checkpoint(store, path):
    """Fill ``store`` in place from a checkpoint directory; returns the manifest."""
    root = Path(path)
    manifest = read_manifest(root)
    arrays = {}
    adam_m, adam_v = {}, {}
    for name, info in manifest["tensors"].items():
        arr = dmt4.read(root / _tensor_file(name))
        if list(arr.shape) != info["dims"]:
            raise FormatError(f"{name}: file dims {arr.shape} disagree with manifest {info['dims']}", 8)
        arrays[name] = arr
        if info.get("adam"):
            adam_m[name] = dmt4.read(root / _tensor_file(name, ".adam_m")).astype(store.dtype)
            adam_v[name] = dmt4.read(root / _tensor_file(name, ".adam_v")).astype(store.dtype)
    store.load_state_dict(arrays)
    if "adam" in manifest:
        a = manifest["adam"]
        store.adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["step"], adam_m, adam_v)
    store.meta.update(manifest.get("meta", {}))
    return manifest
