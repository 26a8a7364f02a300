"""Parameter storage, Kaiming initialization and Adam."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .tensor import Gradients, Tensor


def kaiming_init(shape, fan_in: int, seed) -> Tensor:
    """Normal(0, sqrt(2 / fan_in)) samples, reproducible for a given seed."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=tuple(shape)))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class ParamStore:
    """Named learnable tensors plus their Adam moments.

    Each parameter draws from its own generator seeded by ``(seed, crc32(name))``
    so initial values do not depend on creation order.
    """

    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    state: dict[str, AdamState] = field(default_factory=dict)

    def add(self, name: str, shape, init: str = "kaiming", fan_in: int | None = None,
            value: float = 0.0) -> Tensor:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(int(s) for s in shape)
        if init == "kaiming":
            if fan_in is None:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            t = kaiming_init(shape, fan_in, (self.seed, zlib.crc32(name.encode())))
        elif init == "zeros":
            t = Tensor(np.zeros(shape))
        elif init == "ones":
            t = Tensor(np.ones(shape))
        elif init == "constant":
            t = Tensor(np.full(shape, value))
        else:
            raise ValueError(f"unknown init {init!r}")
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        self.state[name] = AdamState(np.zeros(shape), np.zeros(shape))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def collect(self, grads: Gradients) -> dict[str, np.ndarray]:
        """Per-name gradients; parameters absent from the tape get zeros."""
        out = {}
        for name, p in self.params.items():
            g = grads.get(p)
            out[name] = np.zeros(p.shape) if g is None else g
        return out

    def set_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            p = self.params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update of every parameter in ``store`` (in place)."""
    missing = [name for name in store.params if name not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s): {', '.join(missing[:5])}")
    for name, p in store.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        st = store.state[name]
        st.step += 1
        st.m *= beta1
        st.m += (1.0 - beta1) * g
        st.v *= beta2
        st.v += (1.0 - beta2) * (g * g)
        m_hat = st.m / (1.0 - beta1 ** st.step)
        v_hat = st.v / (1.0 - beta2 ** st.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store
