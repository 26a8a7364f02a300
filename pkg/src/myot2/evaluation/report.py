"""Subject-level evaluation tables assembled from label and T2 maps."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .metrics import bland_altman, dice, pearson

FOREGROUND = {"LV": 1, "MYO": 2, "RV": 3}


def myo_mean(t2: np.ndarray, labels: np.ndarray, myo_class: int = 2) -> float:
    """Mean T2 over every myocardial pixel of every slice."""
    mask = np.asarray(labels) == myo_class
    if not mask.any():
        raise ValueError("no myocardial pixels")
    return float(np.asarray(t2, dtype=np.float64)[mask].mean())


def _mean_sd(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "sd": sd}


def evaluate_pairs(names: Sequence[str], pred_labels: Sequence[np.ndarray],
                   pred_t2: Sequence[np.ndarray | None], truth_labels: Sequence[np.ndarray],
                   truth_t2: Sequence[np.ndarray], mask_source: str = "truth") -> dict:
    """Dice per class (mean and SD over subjects), MYO mean-T2 pairs, Bland-Altman and Pearson.

    ``mask_source`` picks the myocardium used for both T2 means: the truth
    mask isolates quantification error from segmentation error.
    """
    n = len(names)
    if not (len(pred_labels) == len(pred_t2) == len(truth_labels) == len(truth_t2) == n):
        raise ValueError("prediction and truth lists differ in length")
    if n == 0:
        raise ValueError("nothing to evaluate")
    if mask_source not in ("truth", "pred"):
        raise ValueError("mask_source must be 'truth' or 'pred'")
    subjects = []
    per_class = {k: [] for k in FOREGROUND}
    average = []
    m_pred, m_truth = [], []
    for i, name in enumerate(names):
        entry: dict = {"name": name}
        if pred_labels[i] is not None:
            d = {k: dice(pred_labels[i], truth_labels[i], c) for k, c in FOREGROUND.items()}
            for k, v in d.items():
                per_class[k].append(v)
            avg = float(np.mean(list(d.values())))
            average.append(avg)
            entry["dice"] = d
            entry["dice_average"] = avg
        if pred_t2[i] is not None:
            mask_labels = truth_labels[i] if mask_source == "truth" else pred_labels[i]
            mp = myo_mean(pred_t2[i], mask_labels)
            mt = myo_mean(truth_t2[i], mask_labels)
            m_pred.append(mp)
            m_truth.append(mt)
            entry["myo_t2_pred"] = mp
            entry["myo_t2_truth"] = mt
        subjects.append(entry)
    out: dict = {"subjects": subjects, "n_subjects": n, "mask_source": mask_source}
    if average:
        out["dice"] = {k: _mean_sd(v) for k, v in per_class.items()}
        out["dice"]["average"] = _mean_sd(average)
    else:
        out["dice"] = None
    if m_pred:
        out["myo_t2"] = {"pred_mean": float(np.mean(m_pred)), "truth_mean": float(np.mean(m_truth)),
                         "abs_bias": abs(float(np.mean(np.subtract(m_pred, m_truth))))}
        try:
            out["bland_altman"] = bland_altman(m_pred, m_truth).to_dict()
        except ValueError as exc:
            out["bland_altman"] = {"error": str(exc)}
        try:
            out["pearson"] = {"r": pearson(m_pred, m_truth), "error": None}
        except ValueError as exc:
            out["pearson"] = {"r": None, "error": str(exc)}
    else:
        out["myo_t2"] = out["bland_altman"] = out["pearson"] = None
    return out
