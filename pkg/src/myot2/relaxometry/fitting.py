"""Mono-exponential T2 fitting by nonlinear least squares.

The model is ``signal_c = s0 * exp(-TE_c / t2)``. In ``joint_s0`` mode the
amplitude is profiled out in closed form, ``s0*(t2) = sum(s e) / sum(e e)``,
which leaves a one-dimensional search over t2. In ``fixed_s0_first_echo`` mode
s0 is the first-echo value.

The per-pixel kernel is compiled when the extension is built and falls back
to a vectorized numpy implementation otherwise (or when ``MYOT2_PURE_PYTHON``
is set). Pixels are cut into fixed blocks before being handed to the thread
pool, so the assembled map does not depend on the worker count.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _pyfit
from .volume import T2_WINDOW_MS, MultiEchoVolume, T2Map, truncate_window

try:
    if os.environ.get("MYOT2_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _cfit
except ImportError:  # pragma: no cover - depends on the build
    _cfit = None

BACKEND = "cython" if _cfit is not None else "python"
BACKENDS = ("cython", "python") if _cfit is not None else ("python",)
BLOCK_PIXELS = 4096

MODES = {"joint_s0": _pyfit.JOINT, "fixed_s0_first_echo": _pyfit.FIXED}


@dataclass(frozen=True)
class FitConfig:
    mode: str = "joint_s0"
    t2_bounds: tuple[float, float] = (1.0, 200.0)
    grid_step: float = 1.0
    tol: float = 1e-3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        lo, hi = self.t2_bounds
        if not 0 < lo < hi:
            raise ValueError(f"t2 bounds must satisfy 0 < min < max, got {self.t2_bounds}")
        if self.grid_step <= 0 or self.tol <= 0:
            raise ValueError("grid_step and tol must be positive")

    def coarse_grid(self) -> np.ndarray:
        lo, hi = self.t2_bounds
        n = int(math.ceil((hi - lo) / self.grid_step - 1e-9))
        return np.minimum(lo + self.grid_step * np.arange(n + 1), hi)


class PixelFit(NamedTuple):
    t2: float
    s0: float
    residual: float
    valid: bool


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get("MYOT2_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    return threads


def fit_signals(signals, echoes_ms, cfg: FitConfig = FitConfig(), threads: int | None = None,
                backend: str | None = None):
    """Fit each row of a (P, C) signal array. Returns (t2, s0, residual, valid)."""
    sig = np.ascontiguousarray(np.asarray(signals, dtype=np.float64))
    te = np.ascontiguousarray(np.asarray(echoes_ms, dtype=np.float64))
    if sig.ndim != 2 or sig.shape[1] != te.size:
        raise ValueError(f"signals {sig.shape} do not match {te.size} echo times")
    if te.size < 2:
        raise ValueError("at least two echo times are required")
    backend = backend or BACKEND
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} not available (have {BACKENDS})")
    grid = cfg.coarse_grid()
    mode = MODES[cfg.mode]
    lo, hi = cfg.t2_bounds
    n = sig.shape[0]
    blocks = [(i, min(i + BLOCK_PIXELS, n)) for i in range(0, n, BLOCK_PIXELS)]

    if backend == "cython":
        t2, s0, res = np.zeros(n), np.zeros(n), np.zeros(n)
        valid = np.zeros(n, dtype=np.uint8)

        def run(block):
            _cfit.fit_block(sig, te, grid, mode, lo, hi, cfg.tol, t2, s0, res, valid, *block)
    else:
        parts: dict[int, tuple] = {}

        def run(block):
            parts[block[0]] = _pyfit.fit_block(sig[block[0]:block[1]], te, grid, mode,
                                               lo, hi, cfg.tol)

    workers = min(resolve_threads(threads), max(len(blocks), 1))
    if workers == 1:
        for blk in blocks:
            run(blk)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, blocks))

    if backend != "cython":
        if not blocks:
            return np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool)
        t2, s0, res, valid = (np.concatenate([parts[b[0]][i] for b in blocks]) for i in range(4))
    return t2, s0, res, valid.astype(bool)


def fit_t2_pixel(signal, echoes_ms, cfg: FitConfig = FitConfig(),
                 backend: str | None = None) -> PixelFit:
    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim != 1 or sig.size != len(echoes_ms):
        raise ValueError(f"signal of length {sig.size} vs {len(echoes_ms)} echo times")
    if not np.isfinite(sig).all():
        raise ValueError("signal contains non-finite values")
    if (sig < 0).any():
        raise ValueError("signal must be nonnegative")
    t2, s0, res, valid = fit_signals(sig[None, :], echoes_ms, cfg, threads=1, backend=backend)
    return PixelFit(float(t2[0]), float(s0[0]), float(res[0]), bool(valid[0]))


def fit_t2_map(v: MultiEchoVolume, slice_index: int, cfg: FitConfig = FitConfig(),
               threads: int | None = None, backend: str | None = None) -> T2Map:
    """Fit one slice pixel by pixel, then clamp into the [0, 200] ms window."""
    if not 0 <= slice_index < v.slices:
        raise IndexError(f"slice {slice_index} out of range for {v.slices} slices")
    sl = v.voxels[slice_index]  # C x H x W
    c, h, w = sl.shape
    signals = sl.reshape(c, -1).T
    t2, _, _, valid = fit_signals(signals, v.echoes_ms, cfg, threads, backend)
    return truncate_window(T2Map(t2.reshape(h, w), valid.reshape(h, w)), *T2_WINDOW_MS)


def fit_t2_volume(v: MultiEchoVolume, cfg: FitConfig = FitConfig(),
                  threads: int | None = None, backend: str | None = None) -> T2Map:
    """All slices at once; same per-pixel results as :func:`fit_t2_map`."""
    s, c, h, w = v.voxels.shape
    signals = v.voxels.transpose(0, 2, 3, 1).reshape(-1, c)
    t2, _, _, valid = fit_signals(signals, v.echoes_ms, cfg, threads, backend)
    return truncate_window(T2Map(t2.reshape(s, h, w), valid.reshape(s, h, w)), *T2_WINDOW_MS)


# --------------------------------------------------------------------------
# brute-force oracle


def oracle_grid(bounds: tuple[float, float], step: float) -> np.ndarray:
    """Candidates ``lo + k*step`` for k = 1..n, n = round((hi - lo) / step)."""
    if step <= 0:
        raise ValueError("step must be positive")
    lo, hi = bounds
    n = int(round((hi - lo) / step))
    return np.linspace(lo, hi, n + 1)[1:]


def profiled_residual(signal, echoes_ms, t2_values, mode: str = "joint_s0") -> np.ndarray:
    """Sum of squared residuals at each candidate t2 with s0 profiled (or fixed)."""
    s = np.asarray(signal, dtype=np.float64)
    te = np.asarray(echoes_ms, dtype=np.float64)
    t2s = np.atleast_1d(np.asarray(t2_values, dtype=np.float64))
    e = np.exp(-te[None, :] / t2s[:, None])
    if mode == "joint_s0":
        amp = (e @ s) / (e * e).sum(axis=1)
    else:
        amp = np.full(t2s.size, s[0])
    r = amp[:, None] * e - s[None, :]
    return (r * r).sum(axis=1)


def oracle_grid_fit(signal, echoes_ms, bounds: tuple[float, float] = (1.0, 200.0),
                    step: float = 0.01, mode: str = "joint_s0") -> float:
    """Arg-min of the directly evaluated residual over the dense grid.

    An all-zero signal ties at every candidate; like the solver, the oracle
    reports 0 for it.
    """
    s = np.asarray(signal, dtype=np.float64)
    if not s.any():
        return 0.0
    grid = oracle_grid(bounds, step)
    return float(grid[np.argmin(profiled_residual(s, echoes_ms, grid, mode))])


def oracle_grid_fit_many(signals, echoes_ms, bounds: tuple[float, float] = (1.0, 200.0),
                         step: float = 0.01, mode: str = "joint_s0", chunk: int = 64) -> np.ndarray:
    """:func:`oracle_grid_fit` for each row of a (P, C) array, evaluated in chunks."""
    sig = np.atleast_2d(np.asarray(signals, dtype=np.float64))
    te = np.asarray(echoes_ms, dtype=np.float64)
    grid = oracle_grid(bounds, step)
    e = np.exp(-te[None, :] / grid[:, None])  # G x C
    out = np.zeros(sig.shape[0])
    for lo in range(0, sig.shape[0], chunk):
        s = sig[lo:lo + chunk]
        if mode == "joint_s0":
            amp = (s @ e.T) / (e * e).sum(axis=1)[None, :]
        else:
            amp = np.repeat(s[:, :1], grid.size, axis=1)
        r = amp[:, :, None] * e[None] - s[:, None, :]
        best = grid[np.argmin((r * r).sum(axis=2), axis=1)]
        out[lo:lo + chunk] = np.where(s.any(axis=1), best, 0.0)
    return out
