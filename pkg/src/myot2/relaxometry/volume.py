"""Multi-echo volumes, T2 maps and their preprocessing."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

T2_WINDOW_MS = (0.0, 200.0)


@dataclass(frozen=True)
class MultiEchoVolume:
    """``voxels`` has shape (slices, echoes, height, width)."""

    voxels: np.ndarray
    echoes_ms: tuple[float, ...]

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float64)
        echoes = tuple(float(t) for t in self.echoes_ms)
        if vox.ndim != 4:
            raise ValueError(f"voxels must be 4-D (S, C, H, W), got shape {vox.shape}")
        if len(echoes) < 2:
            raise ValueError("at least two echo times are required")
        if any(b <= a for a, b in zip(echoes, echoes[1:])):
            raise ValueError(f"echo times must be strictly increasing: {echoes}")
        if vox.shape[1] != len(echoes):
            raise ValueError(f"{vox.shape[1]} echo images but {len(echoes)} echo times")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "echoes_ms", echoes)

    @property
    def slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[2]

    @property
    def width(self) -> int:
        return self.voxels.shape[3]


@dataclass(frozen=True)
class T2Map:
    """Per-pixel T2 in ms with a validity mask; shape (slices, height, width)."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        if vals.shape != valid.shape:
            raise ValueError(f"values {vals.shape} and mask {valid.shape} differ")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", valid)


def normalize_minmax(v: MultiEchoVolume) -> MultiEchoVolume:
    """Scale with one min/max pair taken jointly over every echo and slice."""
    lo, hi = float(v.voxels.min()), float(v.voxels.max())
    if not hi > lo:
        raise ValueError("cannot normalize a constant volume (max == min)")
    out = (v.voxels - lo) / (hi - lo)
    return replace(v, voxels=np.clip(out, 0.0, 1.0))


def crop_bounds(size: int, side: int) -> tuple[int, int]:
    # start = floor(margin / 2): an odd leftover row/column lands after the crop.
    margin = size - side
    start = margin // 2
    return start, start + side


def center_crop(v: MultiEchoVolume, side: int) -> MultiEchoVolume:
    if side < 1 or side > min(v.height, v.width):
        raise ValueError(f"crop side {side} exceeds {v.height}x{v.width}")
    r0, r1 = crop_bounds(v.height, side)
    c0, c1 = crop_bounds(v.width, side)
    return replace(v, voxels=v.voxels[:, :, r0:r1, c0:c1].copy())


def center_crop_array(arr: np.ndarray, side: int) -> np.ndarray:
    """Same centering rule on the last two axes of any array."""
    h, w = arr.shape[-2:]
    if side < 1 or side > min(h, w):
        raise ValueError(f"crop side {side} exceeds {h}x{w}")
    r0, r1 = crop_bounds(h, side)
    c0, c1 = crop_bounds(w, side)
    return arr[..., r0:r1, c0:c1].copy()


def truncate_window(m: T2Map, lo: float = T2_WINDOW_MS[0], hi: float = T2_WINDOW_MS[1]) -> T2Map:
    if not lo < hi:
        raise ValueError(f"window bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return replace(m, values=np.clip(m.values, lo, hi))
