"""Overlap, correlation and agreement statistics."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BA_Z = 1.96


def dice(a: np.ndarray, b: np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A| + |B|) for one class; 1.0 when both masks are empty."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    ma, mb = a == class_id, b == class_id
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((ma & mb).sum()) / total


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"pearson: length mismatch {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson: zero variance in an input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class BaReport:
    bias: float
    sd: float
    lower: float
    upper: float
    coverage: float
    means: tuple[float, ...]
    diffs: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"bias": self.bias, "sd": self.sd, "lower": self.lower, "upper": self.upper,
                "coverage": self.coverage, "n": len(self.diffs),
                "points": [{"mean": m, "diff": d} for m, d in zip(self.means, self.diffs)]}


def bland_altman(m1, m2) -> BaReport:
    """Bias, sample SD (n-1) and 1.96 SD limits of the paired differences m1 - m2."""
    m1 = np.asarray(m1, dtype=np.float64).ravel()
    m2 = np.asarray(m2, dtype=np.float64).ravel()
    if m1.size != m2.size:
        raise ValueError(f"bland_altman: length mismatch {m1.size} vs {m2.size}")
    if m1.size < 2:
        raise ValueError("bland_altman needs at least two pairs")
    d = m1 - m2
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    half = BA_Z * sd
    lower, upper = bias - half, bias + half
    coverage = float(np.mean((d >= lower) & (d <= upper)))
    means = (m1 + m2) / 2
    return BaReport(bias, sd, lower, upper, coverage,
                    tuple(float(v) for v in means), tuple(float(v) for v in d))
