"""Minimal float64 tensor library with reverse-mode differentiation."""
from . import ops
from .optim import AdamState, ParamStore, adam_step, kaiming_init
from .tensor import Gradients, Graph, Node, Tensor, as_tensor, backward

__all__ = [
    "ops", "Tensor", "Graph", "Node", "Gradients", "as_tensor", "backward",
    "ParamStore", "AdamState", "adam_step", "kaiming_init",
]
