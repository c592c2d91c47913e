"""Simulated expert: boundary hints, Gaussian hint maps, click schedules.

The simulated expert clicks ground-truth boundary voxels inside the current
error region, optionally jittered for robustness studies, and hint maps are
max-combined Gaussian bumps so past clicks are never forgotten.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

#: Gaussian bump parameters: peak 1 at the click, sigma in voxels, truncated
#: at the given Euclidean radius (kernel extent ~8 voxels).
HINT_SIGMA = 2.0
HINT_RADIUS = 4


class HintPoint(NamedTuple):
    z: int
    y: int
    x: int


@dataclass(frozen=True)
class HintSchedule:
    """Clicks granted before each refinement step."""

    points_per_step: tuple[int, ...] = (25, 5, 5, 5, 5)
    perturb_radius: int = 0

    @property
    def total(self) -> int:
        return sum(self.points_per_step)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of foreground voxels with a six-connected background neighbor.

    The volume border counts as background, so foreground touching the edge
    is boundary.
    """
    fg = mask.astype(bool)
    if not fg.any():
        raise ValueError("mask has no foreground")
    padded = np.pad(fg, 1)
    interior = np.ones_like(fg)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return fg & ~interior


def boundary_points(mask: np.ndarray) -> list[HintPoint]:
    return [HintPoint(*map(int, p)) for p in np.argwhere(boundary_voxels(mask))]


def select_hints(gt: np.ndarray, pred: np.ndarray, k: int,
                 rng: np.random.Generator, perturb_radius: int = 0) -> list[HintPoint]:
    """Pick k boundary clicks inside the prediction-error region.

    Sampling is uniform without replacement from boundary(gt) & (gt != pred);
    if that intersection is smaller than k the remainder comes from the full
    boundary. Each point is then jittered per-axis within +-perturb_radius
    and clamped in-volume.
    """
    if k <= 0:
        return []
    boundary = boundary_voxels(gt)
    error = gt.astype(bool) ^ pred.astype(bool)
    candidates = np.argwhere(boundary & error)
    chosen: list[np.ndarray] = []
    if len(candidates):
        take = min(k, len(candidates))
        sel = rng.choice(len(candidates), size=take, replace=False)
        chosen.extend(candidates[sel])
    if len(chosen) < k:
        fallback = np.argwhere(boundary)
        need = k - len(chosen)
        replace = len(fallback) < need
        sel = rng.choice(len(fallback), size=need, replace=replace)
        chosen.extend(fallback[sel])
    pts = np.array(chosen, dtype=np.int64)
    if perturb_radius > 0:
        jitter = rng.integers(-perturb_radius, perturb_radius + 1, size=pts.shape)
        pts = pts + jitter
        pts = np.clip(pts, 0, np.array(gt.shape) - 1)
    return [HintPoint(*map(int, p)) for p in pts]


def _bump_kernel(dtype=np.float32) -> np.ndarray:
    r = HINT_RADIUS
    zz, yy, xx = np.mgrid[-r:r + 1, -r:r + 1, -r:r + 1]
    d2 = (zz ** 2 + yy ** 2 + xx ** 2).astype(np.float64)
    kernel = np.exp(-d2 / (2.0 * HINT_SIGMA ** 2))
    kernel[d2 > r * r] = 0.0
    return kernel.astype(dtype)


_KERNEL = _bump_kernel()


def gaussian_hint_map(shape: tuple[int, int, int], points: list[HintPoint],
                      prev: np.ndarray | None = None) -> np.ndarray:
    """Max-combine truncated Gaussian bumps (peak 1) over prev at each point."""
    out = np.zeros(shape, np.float32) if prev is None else prev.astype(np.float32).copy()
    r = HINT_RADIUS
    dims = np.array(shape)
    for p in points:
        if not (0 <= p.z < shape[0] and 0 <= p.y < shape[1] and 0 <= p.x < shape[2]):
            raise ValueError(f"hint point {tuple(p)} outside volume {shape}")
        lo = np.maximum(np.array(p) - r, 0)
        hi = np.minimum(np.array(p) + r + 1, dims)
        klo = lo - (np.array(p) - r)
        khi = klo + (hi - lo)
        region = out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        np.maximum(
            region,
            _KERNEL[klo[0]:khi[0], klo[1]:khi[1], klo[2]:khi[2]],
            out=region,
        )
    return out
