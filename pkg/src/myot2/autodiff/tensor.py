"""Dense float64 tensors and the reverse-mode tape.

Operations append a :class:`Node` to the innermost active :class:`Graph`
whenever one of their inputs requires a gradient. :func:`backward` walks the
tape strictly in reverse insertion order, so no topological sort is needed.
Outside of a ``with Graph():`` block nothing is recorded, which is how
inference runs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Graph"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic is forwarded to ops; imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(eq=False)
class Graph:
    """Append-only op tape. Single owner; not safe for concurrent recording."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def recording() -> bool:
    return bool(_ACTIVE)


def record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    """Wrap ``out`` as a Tensor and, if needed, put it on the active tape.

    Raises FloatingPointError for any non-finite output value.
    """
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    result = Tensor(out)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _ACTIVE[-1].nodes.append(Node(op, tuple(inputs), result, vjp))
    return result


class Gradients:
    """Gradient table keyed by tensor identity."""

    def __init__(self, table: dict[int, np.ndarray], keep: dict[int, Tensor]):
        self._table = table
        self._keep = keep  # holds references so ids stay valid

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._table[id(t)]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._table

    def get(self, t: Tensor, default=None):
        return self._table.get(id(t), default)

    def __len__(self) -> int:
        return len(self._table)


def backward(graph: Graph, loss: Tensor) -> Gradients:
    """Reverse sweep over ``graph`` seeded with d(loss)/d(loss) = 1.

    Intermediate gradients are released as soon as they are consumed;
    the returned table holds gradients for tape leaves only.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(n.output) for n in graph.nodes}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        parts = node.vjp(g)
        for inp, gi in zip(node.inputs, parts):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key not in produced:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    if id(loss) in grads and id(loss) not in produced:
        leaves[id(loss)] = loss
    return Gradients({k: grads[k] for k in leaves if k in grads}, leaves)
