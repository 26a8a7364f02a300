"""AHA 16+1 segment bullseye: segment means, residual bullseyes and SVG rendering.

Angles are counterclockwise with rows pointing down. Sector 0 of every ring
starts at the reference angle (the LV centroid -> RV centroid direction).
Segments 0-5 are basal, 6-11 mid and 12-15 apical; the center carries the
global myocardial mean.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

RINGS = ("basal", "mid", "apical")
RING_SECTORS = {"basal": 6, "mid": 6, "apical": 4}
RING_OFFSET = {"basal": 0, "mid": 6, "apical": 12}
N_SEGMENTS = 16


def default_rings(slices: int) -> list[str]:
    """Acquisition order split into thirds: base first, apex last."""
    if slices < 1:
        raise ValueError("need at least one slice")
    return [RINGS[min(2, i * 3 // slices)] for i in range(slices)]


def centroid(mask: np.ndarray) -> tuple[float, float]:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("centroid of an empty mask")
    return float(rows.mean()), float(cols.mean())


def reference_angle(lv_centroid, rv_centroid) -> float:
    """Direction LV -> RV in radians, counterclockwise with rows down."""
    dr = rv_centroid[0] - lv_centroid[0]
    dc = rv_centroid[1] - lv_centroid[1]
    if dr == 0 and dc == 0:
        raise ValueError("LV and RV centroids coincide")
    return math.atan2(-dr, dc)


def sector_index(rows, cols, center, ref_angle: float, sectors: int) -> np.ndarray:
    ang = np.arctan2(-(np.asarray(rows, dtype=np.float64) - center[0]),
                     np.asarray(cols, dtype=np.float64) - center[1])
    rel = np.mod(ang - ref_angle, 2 * math.pi)
    idx = np.floor(rel / (2 * math.pi / sectors)).astype(np.int64)
    return np.minimum(idx, sectors - 1)


def _nan_to_none(v: float):
    return None if math.isnan(v) else v


@dataclass(frozen=True)
class BullseyeReport:
    rings: tuple[str, ...]
    segments: tuple[float, ...]  # 16 means; NaN where no pixel fell in a segment
    counts: tuple[int, ...]
    center: float
    reference_angles: tuple[float, ...]  # radians, one per slice

    def to_dict(self) -> dict:
        return {"rings": list(self.rings), "segments": [_nan_to_none(v) for v in self.segments],
                "counts": list(self.counts), "center": self.center,
                "reference_angles_rad": list(self.reference_angles)}

    @classmethod
    def from_dict(cls, d: dict) -> "BullseyeReport":
        segs = tuple(math.nan if v is None else float(v) for v in d["segments"])
        if len(segs) != N_SEGMENTS:
            raise ValueError(f"expected {N_SEGMENTS} segments, got {len(segs)}")
        return cls(tuple(d["rings"]), segs, tuple(int(c) for c in d["counts"]),
                   float(d["center"]), tuple(float(a) for a in d["reference_angles_rad"]))


@dataclass(frozen=True)
class BullseyeDiff:
    segments: tuple[float, ...]
    center: float

    def to_dict(self) -> dict:
        return {"segments": [_nan_to_none(v) for v in self.segments], "center": self.center}


def aha_bullseye(t2: np.ndarray, myo_mask: np.ndarray, lv_centroids: Sequence, rv_centroids: Sequence,
                 rings: Sequence[str] | None = None) -> BullseyeReport:
    """Segment means of ``t2`` over the myocardium, slice by slice.

    ``t2`` and ``myo_mask`` are (S, H, W) or (H, W). Pixels are sectored
    about each slice's LV centroid.
    """
    t2 = np.asarray(t2, dtype=np.float64)
    mask = np.asarray(myo_mask, dtype=bool)
    if t2.ndim == 2:
        t2, mask = t2[None], mask[None]
    if t2.shape != mask.shape:
        raise ValueError(f"t2 {t2.shape} and mask {mask.shape} differ")
    s = t2.shape[0]
    rings = list(default_rings(s) if rings is None else rings)
    if len(rings) != s or len(lv_centroids) != s or len(rv_centroids) != s:
        raise ValueError("need one ring, LV centroid and RV centroid per slice")
    parts: list[list[np.ndarray]] = [[] for _ in range(N_SEGMENTS)]
    angles, used = [], []
    for i in range(s):
        if rings[i] not in RING_SECTORS:
            raise ValueError(f"unknown ring {rings[i]!r}")
        if not mask[i].any():
            raise ValueError(f"slice {i}: empty myocardium mask")
        ref = reference_angle(lv_centroids[i], rv_centroids[i])
        angles.append(ref)
        rows, cols = np.nonzero(mask[i])
        vals = t2[i][rows, cols]
        seg = RING_OFFSET[rings[i]] + sector_index(rows, cols, lv_centroids[i], ref,
                                                   RING_SECTORS[rings[i]])
        for k in np.unique(seg):
            parts[k].append(vals[seg == k])
        used.append(vals)
    counts = [int(sum(p.size for p in ps)) for ps in parts]
    means = [float(np.mean(np.concatenate(ps))) if ps else math.nan for ps in parts]
    center = float(np.mean(np.concatenate(used)))
    return BullseyeReport(tuple(rings), tuple(means), tuple(counts), center, tuple(angles))


def bullseye_from_labels(t2: np.ndarray, labels: np.ndarray, rings=None,
                         lv_class: int = 1, myo_class: int = 2, rv_class: int = 3) -> BullseyeReport:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
        t2 = np.asarray(t2)[None]
    lv = [centroid(lab == lv_class) for lab in labels]
    rv = [centroid(lab == rv_class) for lab in labels]
    return aha_bullseye(t2, labels == myo_class, lv, rv, rings)


def bullseye_diff(a, b) -> BullseyeDiff:
    """Per-segment residual a - b, center included."""
    ra = getattr(a, "rings", None)
    rb = getattr(b, "rings", None)
    if ra is not None and rb is not None and set(ra) != set(rb):
        raise ValueError(f"ring structures differ: {sorted(set(ra))} vs {sorted(set(rb))}")
    if len(a.segments) != len(b.segments):
        raise ValueError("segment counts differ")
    segs = tuple(float(x - y) for x, y in zip(a.segments, b.segments))
    return BullseyeDiff(segs, float(a.center - b.center))


# ---------------------------------------------------------------------------
# SVG


def _color(v: float, lo: float, hi: float) -> str:
    if math.isnan(v):
        return "#cccccc"
    t = 0.0 if hi == lo else min(1.0, max(0.0, (v - lo) / (hi - lo)))
    # blue -> white -> red
    if t < 0.5:
        u = t / 0.5
        r, g, b = 0.23 + 0.77 * u, 0.30 + 0.70 * u, 0.75 + 0.25 * u
    else:
        u = (t - 0.5) / 0.5
        r, g, b = 1.0 - 0.29 * u, 1.0 - 0.98 * u, 1.0 - 0.85 * u
    return "#{:02x}{:02x}{:02x}".format(*(int(round(255 * c)) for c in (r, g, b)))


def _polar(cx, cy, r, ang_deg):
    a = math.radians(ang_deg)
    return cx + r * math.cos(a), cy - r * math.sin(a)


def _wedge_path(cx, cy, r_in, r_out, a0, a1) -> str:
    p1 = _polar(cx, cy, r_out, a0)
    p2 = _polar(cx, cy, r_out, a1)
    p3 = _polar(cx, cy, r_in, a1)
    p4 = _polar(cx, cy, r_in, a0)
    large = 1 if a1 - a0 > 180 else 0
    return (f"M {p1[0]:.3f} {p1[1]:.3f} A {r_out} {r_out} 0 {large} 0 {p2[0]:.3f} {p2[1]:.3f} "
            f"L {p3[0]:.3f} {p3[1]:.3f} A {r_in} {r_in} 0 {large} 1 {p4[0]:.3f} {p4[1]:.3f} Z")


def render_svg(report, vmin: float = 0.0, vmax: float = 100.0, title: str = "T2 (ms)",
               size: int = 360) -> str:
    """Standalone SVG: basal ring outside, then mid, apical, and the center disc.

    Segment 0 of each ring is drawn starting at 9 o'clock (the RV side), going
    counterclockwise as on screen.
    """
    cx = cy = size / 2
    r_unit = size * 0.42 / 4
    radii = {"basal": (3 * r_unit, 4 * r_unit), "mid": (2 * r_unit, 3 * r_unit),
             "apical": (r_unit, 2 * r_unit)}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 40}" '
           f'viewBox="0 0 {size} {size + 40}">',
           f'<rect width="100%" height="100%" fill="white"/>',
           f'<text x="{cx}" y="20" text-anchor="middle" font-family="sans-serif" '
           f'font-size="14">{title} [{vmin:g}, {vmax:g}]</text>',
           f'<g transform="translate(0,30)">']
    for ring in RINGS:
        n = RING_SECTORS[ring]
        r_in, r_out = radii[ring]
        step = 360.0 / n
        for j in range(n):
            v = report.segments[RING_OFFSET[ring] + j]
            a0 = 180.0 + j * step
            a1 = a0 + step
            out.append(f'<path d="{_wedge_path(cx, cy, r_in, r_out, a0, a1)}" '
                       f'fill="{_color(v, vmin, vmax)}" stroke="black" stroke-width="1"/>')
            tx, ty = _polar(cx, cy, (r_in + r_out) / 2, (a0 + a1) / 2)
            label = "n/a" if math.isnan(v) else f"{v:.1f}"
            out.append(f'<text x="{tx:.3f}" y="{ty + 4:.3f}" text-anchor="middle" '
                       f'font-family="sans-serif" font-size="11">{label}</text>')
    c = report.center
    out.append(f'<circle cx="{cx}" cy="{cy}" r="{r_unit}" fill="{_color(c, vmin, vmax)}" '
               f'stroke="black" stroke-width="1"/>')
    out.append(f'<text x="{cx}" y="{cy + 4}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{c:.1f}</text>')
    out.append("</g></svg>")
    return "\n".join(out) + "\n"
