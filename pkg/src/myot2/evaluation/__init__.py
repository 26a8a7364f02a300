"""Dice, Pearson, Bland-Altman and AHA bullseye reporting."""
from .bullseye import (N_SEGMENTS, RING_OFFSET, RING_SECTORS, RINGS, BullseyeDiff, BullseyeReport,
                       aha_bullseye, bullseye_diff, bullseye_from_labels, centroid, default_rings,
                       reference_angle, render_svg, sector_index)
from .metrics import BA_Z, BaReport, bland_altman, dice, pearson
from .report import evaluate_pairs, myo_mean

__all__ = [
    "BA_Z", "BaReport", "BullseyeDiff", "BullseyeReport", "N_SEGMENTS", "RINGS", "RING_OFFSET",
    "RING_SECTORS", "aha_bullseye", "bland_altman", "bullseye_diff", "bullseye_from_labels",
    "centroid", "default_rings", "dice", "evaluate_pairs", "myo_mean", "pearson",
    "reference_angle", "render_svg", "sector_index",
]
