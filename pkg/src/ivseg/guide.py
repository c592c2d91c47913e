"""Interaction guidance: SLIC supervoxels ranked by mean action confidence.

The volume is partitioned into supervoxels by k-means-style clustering in
(intensity, z, y, x) feature space; regions with the lowest mean action
confidence are suggested to the user as the next places to interact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class GuideConfig:
    spacing: tuple[float, float, float] = (2.0, 2.0, 2.0)
    compactness: float = 0.1
    initial_count: int = 100
    top_k: int = 5
    decline_per_step: int = 20
    min_count: int = 20

    def __post_init__(self):
        if self.top_k < 1 or self.initial_count < self.top_k:
            raise ValueError("need top_k >= 1 and initial_count >= top_k")


@dataclass
class SupervoxelLabels:
    """A complete partition: every voxel carries one label id in [0, count)."""

    labels: np.ndarray
    count: int


def supervoxel_count_at_step(cfg: GuideConfig, step: int) -> int:
    """Supervoxel budget declines as refinement progresses, with a floor."""
    if step < 1:
        raise ValueError("steps are 1-based")
    return max(cfg.min_count, cfg.initial_count - cfg.decline_per_step * (step - 1))


def _grid_centers(shape, n_target):
    # near-isotropic integer grid with at least n_target cells
    grid = np.ones(3, dtype=int)
    dims = np.array(shape, dtype=np.float64)
    while int(np.prod(grid)) < n_target:
        axis = int(np.argmax(dims / grid))
        if grid[axis] >= shape[axis]:
            order = np.argsort(-(dims / grid))
            for cand in order:
                if grid[cand] < shape[cand]:
                    axis = int(cand)
                    break
            else:
                break
        grid[axis] += 1
    # -0.5: voxel centers sit at integer coords, so cell centers are offset
    axes = [(np.arange(g) + 0.5) * (dim / g) - 0.5 for g, dim in zip(grid, shape)]
    zz, yy, xx = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([zz.ravel(), yy.ravel(), xx.ravel()], axis=1)
    step = float(np.prod(dims / grid) ** (1.0 / 3.0))
    return centers, step


def slic_supervoxels(image: np.ndarray, n_target: int, compactness: float = 0.1,
                     spacing: tuple[float, float, float] = (2.0, 2.0, 2.0),
                     max_iter: int = 10) -> SupervoxelLabels:
    """SLIC clustering of a volume into roughly n_target supervoxels.

    Distance between a voxel and a center is
    sqrt(d_intensity^2 + compactness^2 * d_spatial^2 / S^2) with spatial
    axes scaled by ``spacing``; each center claims voxels within a 2S
    neighborhood per iteration, and a final connectivity pass merges orphan
    fragments into their dominant neighbor. Deterministic (no RNG).
    """
    if image.ndim != 3:
        raise ValueError("expected a 3-d volume")
    if not np.isfinite(image).all():
        raise ValueError("image must be finite")
    if n_target < 1 or n_target > image.size:
        raise ValueError(f"n_target {n_target} out of range for {image.size} voxels")

    shape = image.shape
    sd = image.std()
    intensity = ((image - image.mean()) / sd if sd > 0 else np.zeros_like(image)).astype(np.float64)

    centers_idx, step = _grid_centers(shape, n_target)
    spacing_arr = np.asarray(spacing, dtype=np.float64)
    scaled_step = step * float(spacing_arr.mean())
    # center features: intensity at the rounded grid voxel + scaled coords
    rounded = np.clip(np.round(centers_idx).astype(int), 0, np.array(shape) - 1)
    center_color = intensity[rounded[:, 0], rounded[:, 1], rounded[:, 2]].copy()
    center_pos = centers_idx * spacing_arr

    zs = np.arange(shape[0], dtype=np.float64) * spacing_arr[0]
    ys = np.arange(shape[1], dtype=np.float64) * spacing_arr[1]
    xs = np.arange(shape[2], dtype=np.float64) * spacing_arr[2]

    labels = np.full(shape, -1, dtype=np.int32)
    reach = int(np.ceil(2.0 * step))
    ratio = (compactness ** 2) / (scaled_step ** 2)

    for _ in range(max_iter):
        dist = np.full(shape, np.inf)
        labels.fill(-1)
        for ci in range(len(center_color)):
            cz, cy, cx = center_pos[ci] / spacing_arr  # back to index units
            z0, z1 = max(0, int(cz) - reach), min(shape[0], int(cz) + reach + 1)
            y0, y1 = max(0, int(cy) - reach), min(shape[1], int(cy) + reach + 1)
            x0, x1 = max(0, int(cx) - reach), min(shape[2], int(cx) + reach + 1)
            if z0 >= z1 or y0 >= y1 or x0 >= x1:
                continue
            dz = zs[z0:z1] - center_pos[ci, 0]
            dy = ys[y0:y1] - center_pos[ci, 1]
            dx = xs[x0:x1] - center_pos[ci, 2]
            d_spatial2 = (
                dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2
            )
            d_color2 = (intensity[z0:z1, y0:y1, x0:x1] - center_color[ci]) ** 2
            d = d_color2 + ratio * d_spatial2
            window = dist[z0:z1, y0:y1, x0:x1]
            better = d < window
            window[better] = d[better]
            labels[z0:z1, y0:y1, x0:x1][better] = ci
        # stragglers outside every window: nearest center in scaled space
        if (labels < 0).any():
            miss = np.argwhere(labels < 0)
            pos = miss * spacing_arr
            d = ((pos[:, None, :] - center_pos[None, :, :]) ** 2).sum(axis=2)
            labels[miss[:, 0], miss[:, 1], miss[:, 2]] = d.argmin(axis=1)
        # center update
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(center_color)).astype(np.float64)
        sums_c = np.bincount(flat, weights=intensity.ravel(), minlength=len(center_color))
        zz_idx, yy_idx, xx_idx = np.indices(shape)
        nonzero = counts > 0
        center_color[nonzero] = (sums_c / np.maximum(counts, 1))[nonzero]
        for axis, coords in enumerate((zz_idx, yy_idx, xx_idx)):
            sums = np.bincount(flat, weights=(coords * spacing_arr[axis]).ravel(),
                               minlength=len(center_color))
            center_pos[nonzero, axis] = (sums / np.maximum(counts, 1))[nonzero]

    labels = _enforce_connectivity(labels)
    uniq, inverse = np.unique(labels, return_inverse=True)
    labels = inverse.reshape(shape).astype(np.int32)
    return SupervoxelLabels(labels=labels, count=len(uniq))


_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge all but the largest fragment of each label into a dominant neighbor."""
    out = labels.copy()
    for lab in np.unique(labels):
        comp, n = ndimage.label(out == lab, structure=_SIX_CONN)
        if n <= 1:
            continue
        sizes = ndimage.sum_labels(np.ones_like(comp), comp, index=np.arange(1, n + 1))
        keep = int(np.argmax(sizes)) + 1
        for frag in range(1, n + 1):
            if frag == keep:
                continue
            frag_mask = comp == frag
            ring = ndimage.binary_dilation(frag_mask, structure=_SIX_CONN) & ~frag_mask
            neighbor_labels = out[ring]
            neighbor_labels = neighbor_labels[neighbor_labels != lab]
            if neighbor_labels.size == 0:
                continue
            out[frag_mask] = np.bincount(neighbor_labels).argmax()
    return out


def rank_regions(conf: np.ndarray, sv: SupervoxelLabels, top_k: int) -> list[tuple[int, float]]:
    """Supervoxels ordered by ascending mean confidence (most in need first).

    Ties break toward the lower label id. Returns at most top_k
    (label, mean confidence) pairs.
    """
    if conf.shape != sv.labels.shape:
        raise ValueError("confidence/labels shape mismatch")
    flat = sv.labels.ravel()
    counts = np.bincount(flat, minlength=sv.count)
    sums = np.bincount(flat, weights=conf.ravel().astype(np.float64), minlength=sv.count)
    means = sums / np.maximum(counts, 1)
    ids = np.arange(sv.count)
    order = np.lexsort((ids, means))
    return [(int(i), float(means[i])) for i in order[: min(top_k, sv.count)]]


def suggestions_payload(ranked: list[tuple[int, float]], sv: SupervoxelLabels) -> list[dict]:
    """JSON-ready suggestion records with voxel counts and half-open bboxes."""
    out = []
    for label, mean_conf in ranked:
        coords = np.argwhere(sv.labels == label)
        lo = coords.min(axis=0)
        hi = coords.max(axis=0) + 1
        out.append({
            "label": int(label),
            "mean_conf": float(mean_conf),
            "voxel_count": int(len(coords)),
            "bbox": [int(v) for v in (*lo, *hi)],
        })
    return out
