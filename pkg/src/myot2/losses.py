"""Quantification (SSIM), multi-scale segmentation and dynamically weighted dual-task losses."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def valid_filter_matrix(n: int, taps: np.ndarray) -> np.ndarray:
    """Rows apply ``taps`` at every fully-overlapping position of an n-vector."""
    k = taps.size
    if n < k:
        raise ValueError(f"image extent {n} smaller than the {k}-tap window")
    mat = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        mat[i, i:i + k] = taps
    return mat


def ssim(a, b, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = SSIM_K1, k2: float = SSIM_K2, data_range: float = 1.0) -> Tensor:
    """Mean local SSIM under a Gaussian window, valid region only.

    Accepts [H, W] or [N, 1, H, W]; batched input averages over all maps.
    """
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError("ssim: data_range must be positive")
    h, w = a.shape[-2:]
    taps = gaussian_window(window, sigma)
    left, right = valid_filter_matrix(h, taps), valid_filter_matrix(w, taps)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2

    def blur(x: Tensor) -> Tensor:
        return ops.sandwich(x, left, right)

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = ops.mul(mu_a, mu_a), ops.mul(mu_b, mu_b), ops.mul(mu_a, mu_b)
    var_a = ops.sub(blur(ops.mul(a, a)), mu_aa)
    var_b = ops.sub(blur(ops.mul(b, b)), mu_bb)
    cov = ops.sub(blur(ops.mul(a, b)), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), c1), ops.add(ops.mul(cov, 2.0), c2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), c1), ops.add(ops.add(var_a, var_b), c2))
    return ops.mean(ops.div(num, den))


def loss_quant(truth, pred) -> Tensor:
    """1 - SSIM between normalized truth and predicted T2 maps."""
    return ops.sub(1.0, ssim(truth, pred))


def loss_seg(labels: np.ndarray, seg_logits: Sequence[Tensor]) -> Tensor:
    """Mean over scales of the pixel-mean cross-entropy.

    ``labels`` is [N, H, W] in {0..3}; coarser logits are upsampled to H x W.
    """
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    if len(seg_logits) == 0:
        raise ValueError("loss_seg needs at least one scale")
    h, w = labels.shape[-2:]
    total = None
    for logits in seg_logits:
        if logits.shape[-2:] != (h, w):
            logits = ops.bilinear_resize(logits, h, w)
        term = ops.softmax_cross_entropy(logits, labels)
        total = term if total is None else ops.add(total, term)
    return ops.mul(total, 1.0 / len(seg_logits))


@dataclass
class DwaState:
    """Dynamic weight average bookkeeping; weights always sum to ``c3``."""

    c3: float = 1.0
    c4: float = 2.0
    quant_history: list[float] = field(default_factory=list)
    seg_history: list[float] = field(default_factory=list)
    w1: float = 0.5
    w2: float = 0.5

    def __post_init__(self):
        self.w1, self.w2 = dwa_weights(1.0, 1.0, self.c3, self.c4)

    @property
    def epoch(self) -> int:
        return len(self.quant_history) + 1


def dwa_weights(r1: float, r2: float, c3: float = 1.0, c4: float = 2.0) -> tuple[float, float]:
    # shift by the larger exponent so exploding ratios cannot overflow
    m = max(r1, r2) / c4
    e1, e2 = math.exp(r1 / c4 - m), math.exp(r2 / c4 - m)
    den = e1 + e2
    return c3 * e1 / den, c3 * e2 / den


def dwa_update(state: DwaState, quant_prev: float, seg_prev: float) -> tuple[float, float]:
    """Record epoch t-1 losses and set the weights for epoch t.

    Descent ratios are taken as 1 until two epochs of history exist.
    """
    if quant_prev <= 0 or seg_prev <= 0:
        raise ValueError("loss history must be positive")
    state.quant_history.append(float(quant_prev))
    state.seg_history.append(float(seg_prev))
    if len(state.quant_history) < 2:
        r1 = r2 = 1.0
    else:
        r1 = state.quant_history[-1] / state.quant_history[-2]
        r2 = state.seg_history[-1] / state.seg_history[-2]
    state.w1, state.w2 = dwa_weights(r1, r2, state.c3, state.c4)
    return state.w1, state.w2


def loss_dual(state, quant, seg):
    """w1 * quant + w2 * seg; the weights are constants, not differentiated."""
    w1, w2 = (state.w1, state.w2) if isinstance(state, DwaState) else state
    if isinstance(quant, Tensor) or isinstance(seg, Tensor):
        return ops.add(ops.mul(quant, w1), ops.mul(seg, w2))
    return w1 * quant + w2 * seg
