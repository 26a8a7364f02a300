"""Synthetic short-axis phantoms, noise injection and the 8-way augmentation set."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .relaxometry.volume import MultiEchoVolume, T2Map

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3
CLASS_NAMES = ("background", "LV", "MYO", "RV")


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and tissue parameters of one phantom.

    Angles are in degrees, counterclockwise from the +column axis with rows
    pointing down (so 90 deg is towards row 0). ``center`` is (row, col) and
    defaults to the image center.
    """

    side: int = 64
    center: tuple[float, float] | None = None
    lv_radius: float = 9.0
    myo_outer_radius: float = 14.0
    rv_radius: float = 11.0
    rv_offset: float = 17.0
    rv_angle_deg: float = 180.0
    lv_t2: float = 180.0
    myo_t2: float = 45.0
    rv_t2: float = 180.0
    lv_s0: float = 0.9
    myo_s0: float = 0.6
    rv_s0: float = 0.85
    edema_start_deg: float | None = None
    edema_span_deg: float = 60.0
    edema_delta_ms: float = 25.0
    echoes_ms: tuple[float, ...] = (0.0, 35.0, 55.0)
    slices: int = 1
    apical_scale: float = 0.7
    t2_jitter_ms: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not self.myo_outer_radius > self.lv_radius > 0:
            raise ValueError("need myo_outer_radius > lv_radius > 0")
        if self.rv_radius <= 0 or self.side < 8 or self.slices < 1:
            raise ValueError("invalid phantom geometry")
        for t2 in (self.lv_t2, self.myo_t2, self.rv_t2):
            if not 0 < t2 <= 200:
                raise ValueError(f"tissue T2 {t2} outside (0, 200] ms")
        if self.edema_start_deg is not None and not 0 < self.myo_t2 + self.edema_delta_ms <= 200:
            raise ValueError("edema T2 outside (0, 200] ms")
        if not 0 < self.apical_scale <= 1:
            raise ValueError("apical_scale must lie in (0, 1]")


@dataclass(frozen=True)
class Sample:
    volume: MultiEchoVolume
    labels: np.ndarray  # (S, H, W) uint8
    t2_truth: T2Map  # (S, H, W) ms


def polar_angle_deg(rows: np.ndarray, cols: np.ndarray, center) -> np.ndarray:
    """Counterclockwise angle in [0, 360) about ``center`` with rows pointing down."""
    ang = np.degrees(np.arctan2(-(rows - center[0]), cols - center[1]))
    return np.mod(ang, 360.0)


def _slice_geometry(spec: PhantomSpec, scale: float):
    n = spec.side
    cy, cx = spec.center if spec.center is not None else ((n - 1) / 2, (n - 1) / 2)
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    dist = np.hypot(rows - cy, cols - cx)
    r_in, r_out = spec.lv_radius * scale, spec.myo_outer_radius * scale
    th = math.radians(spec.rv_angle_deg)
    ry = cy - spec.rv_offset * scale * math.sin(th)
    rx = cx + spec.rv_offset * scale * math.cos(th)
    rv_dist = np.hypot(rows - ry, cols - rx)

    labels = np.zeros((n, n), dtype=np.uint8)
    labels[(rv_dist < spec.rv_radius * scale) & (dist >= r_out + 1.0)] = RV
    labels[(dist >= r_in) & (dist < r_out)] = MYO
    labels[dist < r_in] = LV
    angle = polar_angle_deg(rows, cols, (cy, cx))
    return labels, angle


def gen_phantom(spec: PhantomSpec) -> Sample:
    """Noiseless multi-echo phantom with exact labels and T2 ground truth."""
    spec.validate()
    te = np.asarray(spec.echoes_ms, dtype=np.float64)
    n, s_count = spec.side, spec.slices
    rng = np.random.default_rng(spec.seed)
    labels = np.zeros((s_count, n, n), dtype=np.uint8)
    t2 = np.zeros((s_count, n, n))
    s0 = np.zeros((s_count, n, n))
    for s in range(s_count):
        scale = 1.0 if s_count == 1 else 1.0 - (1.0 - spec.apical_scale) * s / (s_count - 1)
        lab, angle = _slice_geometry(spec, scale)
        labels[s] = lab
        for cls, t, amp in ((LV, spec.lv_t2, spec.lv_s0), (MYO, spec.myo_t2, spec.myo_s0),
                            (RV, spec.rv_t2, spec.rv_s0)):
            t2[s][lab == cls] = t
            s0[s][lab == cls] = amp
        if spec.edema_start_deg is not None:
            rel = np.mod(angle - spec.edema_start_deg, 360.0)
            t2[s][(lab == MYO) & (rel < spec.edema_span_deg)] += spec.edema_delta_ms
    if spec.t2_jitter_ms > 0:
        fg = labels > 0
        t2[fg] += rng.normal(0.0, spec.t2_jitter_ms, size=int(fg.sum()))
        t2[fg] = np.clip(t2[fg], 1.0, 200.0)
    fg = labels > 0
    decay = np.zeros((s_count, te.size, n, n))
    decay[:, :, :, :] = np.exp(-te[None, :, None, None] / np.where(fg, t2, 1.0)[:, None])
    voxels = np.where(fg[:, None], s0[:, None] * decay, 0.0)
    return Sample(MultiEchoVolume(voxels, tuple(te)), labels, T2Map(t2, fg))


def random_phantom_spec(seed: int, side: int = 64, **overrides) -> PhantomSpec:
    """Draw a plausible phantom; ``seed`` fixes every parameter."""
    rng = np.random.default_rng(seed)
    scale = side / 64.0
    lv = rng.uniform(7.0, 10.5) * scale
    thick = rng.uniform(4.0, 6.0) * scale
    rv_r = rng.uniform(9.0, 12.0) * scale
    params = dict(
        side=side,
        center=((side - 1) / 2 + rng.uniform(-4, 4) * scale,
                (side - 1) / 2 + rng.uniform(-4, 4) * scale),
        lv_radius=lv,
        myo_outer_radius=lv + thick,
        rv_radius=rv_r,
        rv_offset=lv + thick + rv_r * rng.uniform(0.35, 0.6),
        rv_angle_deg=rng.uniform(160.0, 200.0),
        lv_t2=rng.uniform(150.0, 190.0),
        myo_t2=rng.uniform(40.0, 52.0),
        rv_t2=rng.uniform(150.0, 190.0),
        lv_s0=rng.uniform(0.75, 1.0),
        myo_s0=rng.uniform(0.45, 0.7),
        rv_s0=rng.uniform(0.7, 1.0),
        edema_start_deg=float(rng.uniform(0, 360)) if rng.random() < 0.5 else None,
        seed=seed,
    )
    params.update(overrides)
    return PhantomSpec(**params)


def make_dataset(count: int, seed: int, side: int = 64, **overrides) -> list[Sample]:
    # sample i uses seed + i so partitions of the range generate independently
    return [gen_phantom(random_phantom_spec(seed + i, side, **overrides)) for i in range(count)]


def add_gaussian_noise(v: MultiEchoVolume, std: float, seed: int) -> MultiEchoVolume:
    """Additive i.i.d. Gaussian noise on normalized intensities, clamped to [0, 1]."""
    if std < 0:
        raise ValueError(f"noise std must be >= 0, got {std}")
    if std == 0:
        return v
    noise = np.random.default_rng(seed).normal(0.0, std, size=v.voxels.shape)
    return replace(v, voxels=np.clip(v.voxels + noise, 0.0, 1.0))


# ---------------------------------------------------------------------------
# geometric augmentation

def _warp(sample: Sample, rows: np.ndarray, cols: np.ndarray) -> Sample:
    """Backward-warp every plane: output pixel (r, c) reads source (rows, cols)."""
    coords = np.stack([rows, cols])
    vox = sample.volume.voxels
    out = np.empty_like(vox)
    for s in range(vox.shape[0]):
        for c in range(vox.shape[1]):
            out[s, c] = ndimage.map_coordinates(vox[s, c], coords, order=1, mode="constant")
    labels = np.empty_like(sample.labels)
    t2 = np.empty_like(sample.t2_truth.values)
    for s in range(labels.shape[0]):
        labels[s] = ndimage.map_coordinates(sample.labels[s], coords, order=0, mode="constant")
        t2[s] = ndimage.map_coordinates(sample.t2_truth.values[s], coords, order=1,
                                        mode="constant")
    valid = labels > 0
    t2 = np.where(valid, t2, 0.0)
    return Sample(replace(sample.volume, voxels=np.clip(out, 0.0, None)), labels,
                  T2Map(t2, valid))


def _identity_coords(h: int, w: int):
    return np.mgrid[0:h, 0:w].astype(np.float64)


def _rotation_coords(h, w, angle_deg, rows=None, cols=None):
    if rows is None:
        rows, cols = _identity_coords(h, w)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    th = math.radians(angle_deg)
    dy, dx = rows - cy, cols - cx
    return cy + math.cos(th) * dy - math.sin(th) * dx, cx + math.sin(th) * dy + math.cos(th) * dx


def _crop_coords(h, w, factor, off_r, off_c, rows=None, cols=None):
    if rows is None:
        rows, cols = _identity_coords(h, w)
    return off_r + (rows + 0.5) * factor - 0.5, off_c + (cols + 0.5) * factor - 0.5


def elastic_displacement(shape, sigma: float, alpha: float, seed: int):
    rng = np.random.default_rng(seed)
    dy = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=shape), sigma, mode="reflect")
    dx = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, size=shape), sigma, mode="reflect")
    return alpha * dy, alpha * dx


def elastic_deform(sample: Sample, sigma: float = 8.0, alpha: float = 20.0,
                   seed: int = 0) -> Sample:
    """Displacement = alpha * blur(uniform(-1, 1)), applied by backward warping."""
    if sigma <= 0 or alpha < 0:
        raise ValueError("elastic_deform needs sigma > 0 and alpha >= 0")
    h, w = sample.labels.shape[-2:]
    if alpha == 0:
        return sample
    dy, dx = elastic_displacement((h, w), sigma, alpha, seed)
    rows, cols = _identity_coords(h, w)
    return _warp(sample, rows + dy, cols + dx)


def hflip(sample: Sample) -> Sample:
    vol = replace(sample.volume, voxels=sample.volume.voxels[..., ::-1].copy())
    t2 = T2Map(sample.t2_truth.values[..., ::-1].copy(), sample.t2_truth.valid[..., ::-1].copy())
    return Sample(vol, sample.labels[..., ::-1].copy(), t2)


def vflip(sample: Sample) -> Sample:
    vol = replace(sample.volume, voxels=sample.volume.voxels[..., ::-1, :].copy())
    t2 = T2Map(sample.t2_truth.values[..., ::-1, :].copy(),
               sample.t2_truth.valid[..., ::-1, :].copy())
    return Sample(vol, sample.labels[..., ::-1, :].copy(), t2)


def augment8(sample: Sample, seed: int, max_rotation_deg: float = 15.0,
             crop_range: tuple[float, float] = (0.8, 1.0), sigma: float = 8.0,
             alpha: float = 20.0) -> list[Sample]:
    """identity, hflip, vflip, rotation, crop-resize, elastic, hflip∘elastic, rotation∘crop."""
    rng = np.random.default_rng(seed)
    h, w = sample.labels.shape[-2:]
    angle = rng.uniform(-max_rotation_deg, max_rotation_deg)
    factor = rng.uniform(*crop_range)
    off_r = rng.uniform(0.0, h * (1.0 - factor))
    off_c = rng.uniform(0.0, w * (1.0 - factor))
    elastic_seed = int(rng.integers(2**31))
    angle2 = rng.uniform(-max_rotation_deg, max_rotation_deg)
    factor2 = rng.uniform(*crop_range)
    off_r2 = rng.uniform(0.0, h * (1.0 - factor2))
    off_c2 = rng.uniform(0.0, w * (1.0 - factor2))
    elastic_seed2 = int(rng.integers(2**31))

    rotated = _warp(sample, *_rotation_coords(h, w, angle))
    cropped = _warp(sample, *_crop_coords(h, w, factor, off_r, off_c))
    elastic = elastic_deform(sample, sigma, alpha, elastic_seed)
    flipped_elastic = hflip(elastic_deform(sample, sigma, alpha, elastic_seed2))
    # rotate after cropping: out -> rotation -> crop window -> source
    rr, rc = _rotation_coords(h, w, angle2)
    rot_crop = _warp(sample, *_crop_coords(h, w, factor2, off_r2, off_c2, rr, rc))
    return [sample, hflip(sample), vflip(sample), rotated, cropped, elastic,
            flipped_elastic, rot_crop]
