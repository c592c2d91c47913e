"""Action-confidence calibration: targets, symmetric loss, simulated labels.

The confidence network predicts, per voxel, whether the chosen action's
direction agrees with the (possibly unknown) label. On unlabeled volumes
the calibrated direction becomes a simulated label, and a decisiveness
mask gates which voxels may contribute gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_LOG_EPS = 1e-7


@dataclass(frozen=True)
class DeltaSchedule:
    """Confidence threshold ramp for the unlabeled gradient mask."""

    start: float = 0.85
    end: float = 0.99
    increment_per_epoch: float = 0.00025

    def __post_init__(self):
        if not (0.5 <= self.start <= self.end < 1.0):
            raise ValueError(f"bad schedule bounds: {self.start}..{self.end}")


def delta_at_epoch(sched: DeltaSchedule, epoch: int) -> float:
    """Linear ramp from start, saturating at end."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(sched.start + epoch * sched.increment_per_epoch, sched.end)


def confidence_target(action_values: np.ndarray, label: np.ndarray) -> np.ndarray:
    """g = 1 iff the action direction matches the label's sign convention.

    Exactly one of (a > 0, y > 0) true means a contradiction (g = 0);
    both or neither means agreement (g = 1). Action values must be nonzero.
    """
    a_pos = action_values > 0
    y_pos = label > 0
    return (~(a_pos ^ y_pos)).astype(np.float32)


def bce(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy with the package's epsilon clamp."""
    p = np.clip(pred.astype(np.float64), _LOG_EPS, 1.0 - _LOG_EPS)
    t = target.astype(np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean())


def confidence_loss(conf_fwd, state_channels: np.ndarray, action_values: np.ndarray,
                    targets: np.ndarray) -> float:
    """Symmetric-sample loss: BCE(C(s,a), g) + BCE(C(s,-a), 1-g).

    ``conf_fwd`` maps a (4, D, H, W) input (state channels plus the
    normalized action channel) to a confidence map. Per-voxel mean.
    """
    x = np.concatenate([state_channels, action_channel(action_values)[None]])
    x_sym = np.concatenate([state_channels, action_channel(-action_values)[None]])
    return bce(conf_fwd(x), targets) + bce(conf_fwd(x_sym), 1.0 - targets)


def action_channel(action_values: np.ndarray) -> np.ndarray:
    """Normalize action values into [-1, 1] for the network input."""
    return (action_values / 0.4).astype(np.float32)


def simulated_label(action_values: np.ndarray, conf: np.ndarray,
                    threshold: float = 0.5) -> np.ndarray:
    """Pseudo-label from the confidence-calibrated action direction.

    Confident voxels keep their action's direction; unconfident voxels
    flip it. Positive calibrated direction means foreground.
    """
    keep = conf >= threshold
    direction = np.where(keep, np.sign(action_values), -np.sign(action_values))
    return (direction > 0).astype(np.uint8)


def directional_accuracy(conf: np.ndarray, action_values: np.ndarray,
                         label: np.ndarray) -> float:
    """Fraction of voxels where thresholded confidence predicts the target."""
    g = confidence_target(action_values, label)
    pred = (conf >= 0.5).astype(np.float32)
    return float((pred == g).mean())


def gradient_mask(conf: np.ndarray, delta: float) -> np.ndarray:
    """1 where the confidence net is decisive in either direction (> delta)."""
    if not (0.5 <= delta < 1.0):
        raise ValueError("delta must be in [0.5, 1)")
    c = conf.astype(np.float64)
    return (np.maximum(c, 1.0 - c) > delta).astype(np.uint8)
