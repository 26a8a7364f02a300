"""Data preparation, the DWA training loop, checkpoints, inference and the noise harness."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io as fmt
from .autodiff import Graph, Tensor, adam_step, backward
from .evaluation import evaluate_pairs
from .losses import DwaState, dwa_update, loss_dual, loss_quant, loss_seg
from .model import ModelConfig, SQNet
from .relaxometry.volume import (T2_WINDOW_MS, MultiEchoVolume, T2Map, center_crop,
                                 center_crop_array, normalize_minmax)
from .synth import Sample, add_gaussian_noise, augment8

T2_SCALE = T2_WINDOW_MS[1]
NOISE_LEVELS = (0.01, 0.03, 0.05)
AUGMENT_MODES = ("all8", "cycle")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    lr: float = 1e-3
    seed: int = 0
    augment: bool = True
    augment_mode: str = "all8"  # all8: every variant of every subject; cycle: one variant each
    noise_std: float = 0.0
    c3: float = 1.0
    c4: float = 2.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.augment_mode not in AUGMENT_MODES:
            raise ValueError(f"augment_mode must be one of {AUGMENT_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# data


@dataclass
class Arrays:
    """Slice-level network tensors: x [N,C,H,W] in [0,1], labels [N,H,W], t2 [N,H,W] ms."""

    x: np.ndarray
    labels: np.ndarray
    t2: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def prepare_input(volume: MultiEchoVolume, side: int, noise_std: float = 0.0,
                  noise_seed: int = 0) -> np.ndarray:
    """normalize -> optional noise -> center crop; returns (S, C, side, side)."""
    v = normalize_minmax(volume)
    v = add_gaussian_noise(v, noise_std, noise_seed)
    if v.height < side or v.width < side:
        raise ValueError(f"volume {v.height}x{v.width} is smaller than the model side {side}")
    if (v.height, v.width) != (side, side):
        v = center_crop(v, side)
    return v.voxels


def prepare_samples(samples: Sequence[Sample], side: int, noise_std: float = 0.0,
                    seed: int = 0) -> Arrays:
    xs, ys, ts = [], [], []
    for i, s in enumerate(samples):
        xs.append(prepare_input(s.volume, side, noise_std, seed * 1_000_003 + i))
        ys.append(center_crop_array(s.labels, side))
        ts.append(np.clip(center_crop_array(s.t2_truth.values, side), *T2_WINDOW_MS))
    return Arrays(np.concatenate(xs), np.concatenate(ys).astype(np.uint8), np.concatenate(ts))


def augment_all(samples: Sequence[Sample], seed: int) -> list[Sample]:
    out = []
    for i, s in enumerate(samples):
        out.extend(augment8(s, seed * 7919 + i))
    return out


def augment_cycle(samples: Sequence[Sample], seed: int) -> list[Sample]:
    """One augmented variant per subject, cycling through the eight in order."""
    return [augment8(s, seed * 7919 + i)[i % 8] for i, s in enumerate(samples)]


def training_samples(samples: Sequence[Sample], cfg: TrainConfig) -> list[Sample]:
    if not cfg.augment:
        return list(samples)
    if cfg.augment_mode == "cycle":
        return augment_cycle(samples, cfg.seed)
    return augment_all(samples, cfg.seed)


def load_dataset(root) -> tuple[list[str], list[Sample]]:
    subjects = fmt.list_subjects(root)
    if not subjects:
        raise ValueError(f"{root}: dataset is empty")
    return [p.name for p in subjects], [fmt.read_sample(p) for p in subjects]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: SQNet
    log: list[dict] = field(default_factory=list)
    epochs_run: int = 0


def _batch_seed(seed: int, epoch: int, batch: int) -> int:
    return (seed * 100_003 + epoch) * 1009 + batch


def train_step(model: SQNet, x: np.ndarray, labels: np.ndarray, t2_norm: np.ndarray,
               weights: tuple[float, float], seed: int, lr: float) -> tuple[float | None, float | None]:
    """One forward/backward/Adam step; returns the two task losses (None if ablated)."""
    cfg = model.cfg
    with Graph() as graph:
        out = model.forward(Tensor(x), training=True, seed=seed)
        lq = loss_quant(Tensor(t2_norm[:, None]), out.t2_pred) if cfg.use_quant else None
        ls = loss_seg(labels, out.seg_logits) if cfg.use_seg else None
        if lq is not None and ls is not None:
            total = loss_dual(weights, lq, ls)
        else:
            total = lq if lq is not None else ls
    grads = backward(graph, total)
    adam_step(model.store, model.store.collect(grads), lr=lr)
    return (None if lq is None else lq.item()), (None if ls is None else ls.item())


def train(data: Arrays, model_cfg: ModelConfig, cfg: TrainConfig, log_path=None,
          progress: Callable[[dict], None] | None = None, model: SQNet | None = None) -> TrainResult:
    """Mini-batch Adam with DWA weights refreshed once per epoch.

    With one branch ablated the surviving loss is used alone (weight 1) and
    the other task's column is left out of the log.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.x.shape[1:] != (model_cfg.in_channels, model_cfg.side, model_cfg.side):
        raise ValueError(f"data {data.x.shape[1:]} does not match the model input")
    model = model or SQNet(model_cfg, seed=cfg.seed)
    dwa = DwaState(c3=cfg.c3, c4=cfg.c4)
    t2_norm = data.t2 / T2_SCALE
    result = TrainResult(model)
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_file = log_path.open("w")
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(data))
            if model_cfg.ablation == "full":
                weights = (dwa.w1, dwa.w2)
            elif model_cfg.ablation == "seg_only":
                weights = (0.0, 1.0)
            else:
                weights = (1.0, 0.0)
            q_sum = s_sum = 0.0
            n_seen = 0
            for b, lo in enumerate(range(0, len(data), cfg.batch_size)):
                idx = np.sort(order[lo:lo + cfg.batch_size])
                try:
                    lq, ls = train_step(model, data.x[idx], data.labels[idx], t2_norm[idx],
                                        weights, _batch_seed(cfg.seed, epoch, b), cfg.lr)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"epoch {epoch}, batch {b}: {exc}") from exc
                for v in (lq, ls):
                    if v is not None and not math.isfinite(v):
                        raise TrainingDiverged(f"epoch {epoch}, batch {b}: non-finite loss {v}")
                k = len(idx)
                q_sum += (lq or 0.0) * k
                s_sum += (ls or 0.0) * k
                n_seen += k
            lq_ep, ls_ep = q_sum / n_seen, s_sum / n_seen
            entry: dict = {"epoch": epoch}
            if model_cfg.use_quant:
                entry["L_Quant"] = lq_ep
            if model_cfg.use_seg:
                entry["L_Seg"] = ls_ep
            entry.update(w1=weights[0], w2=weights[1],
                         L_MT=weights[0] * lq_ep + weights[1] * ls_ep,
                         wall_time=time.perf_counter() - start)
            result.log.append(entry)
            result.epochs_run = epoch
            if log_file is not None:
                log_file.write(json.dumps(entry, sort_keys=True) + "\n")
                log_file.flush()
            if progress is not None:
                progress(entry)
            if model_cfg.ablation == "full":
                dwa_update(dwa, lq_ep, ls_ep)
    finally:
        if log_file is not None:
            log_file.close()
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(root, model: SQNet, epoch: int, seed: int, extra: dict | None = None) -> Path:
    meta = {"model": model.cfg.to_dict(), "seed": seed, "epoch": epoch,
            "param_count": model.param_count()}
    if extra:
        meta.update(extra)
    values = {name: p.data for name, p in model.store.params.items()}
    return fmt.write_ckpt(root, values, meta)


def load_checkpoint(root) -> tuple[SQNet, dict]:
    meta, params = fmt.read_ckpt(root)
    if "model" not in meta:
        raise fmt.FormatError(f"{root}: checkpoint meta lacks the model config")
    model = SQNet(ModelConfig.from_dict(meta["model"]), seed=int(meta.get("seed", 0)))
    expected = {n: p.shape for n, p in model.store.params.items()}
    found = {n: tuple(a.shape) for n, a in params.items()}
    if expected != found:
        missing = sorted(set(expected) - set(found))[:3]
        extra = sorted(set(found) - set(expected))[:3]
        raise ValueError(f"{root}: parameters do not match the model config "
                         f"(missing {missing}, unexpected {extra})")
    model.store.set_values(params)
    return model, meta


# ---------------------------------------------------------------------------
# inference and evaluation


def predict_arrays(model: SQNet, x: np.ndarray, batch_size: int = 8):
    labels, t2 = [], []
    for lo in range(0, x.shape[0], batch_size):
        lab, t = model.predict(x[lo:lo + batch_size])
        labels.append(lab)
        t2.append(t)
    lab = None if labels[0] is None else np.concatenate(labels)
    t2m = None if t2[0] is None else np.clip(np.concatenate(t2), *T2_WINDOW_MS)
    return lab, t2m


def infer_volume(model: SQNet, volume: MultiEchoVolume, noise_std: float = 0.0,
                 noise_seed: int = 0):
    """Labels (S, side, side) and a T2Map in ms for one subject."""
    x = prepare_input(volume, model.cfg.side, noise_std, noise_seed)
    if x.shape[1] != model.cfg.in_channels:
        raise ValueError(f"volume has {x.shape[1]} echoes, model expects {model.cfg.in_channels}")
    labels, t2 = predict_arrays(model, x)
    t2map = None if t2 is None else T2Map(t2, np.ones(t2.shape, dtype=bool))
    return labels, t2map


def evaluate_model(model: SQNet, samples: Sequence[Sample], names: Sequence[str] | None = None,
                   noise_std: float = 0.0, seed: int = 0) -> dict:
    names = list(names) if names is not None else [f"subject_{i:03d}" for i in range(len(samples))]
    pl, pt, tl, tt = [], [], [], []
    side = model.cfg.side
    for i, s in enumerate(samples):
        lab, t2 = infer_volume(model, s.volume, noise_std, seed * 1_000_003 + i)
        pl.append(lab)
        pt.append(None if t2 is None else t2.values)
        tl.append(center_crop_array(s.labels, side))
        tt.append(np.clip(center_crop_array(s.t2_truth.values, side), *T2_WINDOW_MS))
    return evaluate_pairs(names, pl, pt, tl, tt)


# ---------------------------------------------------------------------------
# noise adaptation harness


def bench_noise(train_samples: Sequence[Sample], test_samples: Sequence[Sample],
                model_cfg: ModelConfig, cfg: TrainConfig, levels: Sequence[float] = NOISE_LEVELS,
                progress: Callable[[str, dict], None] | None = None) -> dict:
    """Retrain from the same initialization at each noise level and evaluate.

    Noise touches only the network input; labels and T2 truth stay clean.
    """
    base = training_samples(train_samples, cfg)
    rows = []
    for level in levels:
        data = prepare_samples(base, model_cfg.side, level, seed=cfg.seed + 1)
        hook = None if progress is None else (lambda e, lv=level: progress(f"std={lv}", e))
        res = train(data, model_cfg, cfg, progress=hook)
        metrics = evaluate_model(res.model, test_samples, noise_std=level, seed=cfg.seed + 2)
        row = {"std": float(level), "epochs": res.epochs_run, "dice": metrics["dice"]}
        if metrics.get("myo_t2"):
            row["myo_t2_abs_bias"] = metrics["myo_t2"]["abs_bias"]
        rows.append(row)
    return {"method": "SQNet (desk scale)", "levels": [float(v) for v in levels],
            "columns": ["std", "LV", "MYO", "RV", "average"], "rows": rows,
            "train_subjects": len(train_samples), "test_subjects": len(test_samples)}
