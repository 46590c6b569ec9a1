"""Minimal reverse-mode differentiation engine over numpy."""

from . import ops
from .engine import PRIMITIVES, Graph, Node, Tensor, apply, grad_enabled, infer_shape, no_grad
from .gradcheck import CASES, GradCheckReport, check_function, grad_check, grad_check_all
from .params import (
    AdamState,
    ParamStore,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    trunc_normal,
)

__all__ = [
    "AdamState",
    "CASES",
    "Graph",
    "GradCheckReport",
    "Node",
    "PRIMITIVES",
    "ParamStore",
    "Tensor",
    "apply",
    "check_function",
    "grad_check",
    "grad_check_all",
    "grad_enabled",
    "infer_shape",
    "load_checkpoint",
    "no_grad",
    "ops",
    "read_manifest",
    "save_checkpoint",
    "trunc_normal",
]
