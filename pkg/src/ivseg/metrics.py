"""Overlap and surface-distance metrics plus per-step reporting.

ASSD runs on a Euclidean distance transform; the O(n^2) pairwise oracle it
is validated against lives in the test suite.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .expert import boundary_voxels


@dataclass
class StepReport:
    """Per-interaction-step evaluation record."""

    step: int
    dice: float
    assd: float | None
    misunderstanding_rate: float
    reward_sum: float

    def to_dict(self) -> dict:
        return asdict(self)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A&B| / (|A|+|B|); 1.0 when both masks are empty."""
    if pred.shape != gt.shape:
        raise ValueError("mask shape mismatch")
    a = pred.astype(bool)
    b = gt.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def binarize(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Strict threshold: exactly 0.5 stays background."""
    return (prob > threshold).astype(np.uint8)


def assd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Average symmetric surface distance in voxel units.

    Surfaces are the six-connected boundaries (volume border counts as
    background). Raises if either surface is empty.
    """
    if pred.shape != gt.shape:
        raise ValueError("mask shape mismatch")
    sa = boundary_voxels(pred)  # raises on empty foreground
    sb = boundary_voxels(gt)
    # distance to the nearest surface voxel of the other mask
    d_to_b = ndimage.distance_transform_edt(~sb)
    d_to_a = ndimage.distance_transform_edt(~sa)
    total = d_to_b[sa].sum() + d_to_a[sb].sum()
    return float(total / (int(sa.sum()) + int(sb.sum())))


def safe_assd(pred: np.ndarray, gt: np.ndarray) -> float | None:
    """assd, or None when a surface is empty (e.g. an all-background prediction)."""
    if not pred.astype(bool).any() or not gt.astype(bool).any():
        return None
    return assd(pred, gt)


def summarize_steps(reports_per_sample: list[list[StepReport]]) -> list[dict]:
    """Per-step mean/sd rows over a sample set (None assd values excluded)."""
    if not reports_per_sample:
        return []
    n_steps = len(reports_per_sample[0])
    rows = []
    for t in range(n_steps):
        step_reports = [reps[t] for reps in reports_per_sample]
        dices = np.array([r.dice for r in step_reports], dtype=np.float64)
        assds = np.array([r.assd for r in step_reports if r.assd is not None], dtype=np.float64)
        mis = np.array([r.misunderstanding_rate for r in step_reports], dtype=np.float64)
        rows.append({
            "step": t + 1,
            "dice_mean": float(dices.mean()),
            "dice_sd": float(dices.std()),
            "assd_mean": float(assds.mean()) if assds.size else math.nan,
            "assd_sd": float(assds.std()) if assds.size else math.nan,
            "misunderstanding_mean": float(mis.mean()),
        })
    return rows


def write_summary_csv(path: str | Path, rows: list[dict]) -> None:
    """Step-indexed mean/sd table mirroring the per-step improvement layout."""
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
