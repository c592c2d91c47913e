"""Synthetic labeled 3D volumes plus the preprocessing/augmentation pipeline.

Volumes are a smooth background field plus a contrasted foreground region
(a union of randomly deformed ellipsoids) plus voxel noise; the label is
the exact foreground indicator. Deterministic in the spec seed, so desk
runs are reproducible end to end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import Shape3, read_volume, write_volume


@dataclass(frozen=True)
class SynthSpec:
    shape: tuple[int, int, int]
    seed: int
    blob_count: int = 3
    boundary_noise_amp: float = 1.5   # voxels of edge deformation
    intensity_noise_sd: float = 0.35
    foreground_contrast: float = 1.0
    background_amp: float = 0.3       # low-frequency intensity variation


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray | None
    id: str


def _smooth_field(rng: np.random.Generator, shape, coarse=(4, 4, 4)) -> np.ndarray:
    """Unit-variance low-frequency field from a trilinearly upsampled coarse grid."""
    grid = rng.standard_normal(coarse)
    coords = [
        (np.arange(n) + 0.5) * (c / n) - 0.5
        for n, c in zip(shape, coarse)
    ]
    zz, yy, xx = np.meshgrid(*coords, indexing="ij")
    field = ndimage.map_coordinates(grid, [zz, yy, xx], order=1, mode="nearest")
    sd = field.std()
    return (field / sd if sd > 0 else field).astype(np.float32)


def blob_params(spec: SynthSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic (center, semi-axes) draws for the spec, in voxel units."""
    rng = np.random.default_rng(spec.seed)
    return _sample_blobs(rng, spec)


def _sample_blobs(rng: np.random.Generator, spec: SynthSpec):
    dims = np.array(spec.shape, dtype=np.float64)
    blobs = []
    for _ in range(spec.blob_count):
        center = rng.uniform(0.30, 0.70, size=3) * dims
        semi = rng.uniform(0.10, 0.24, size=3) * dims
        blobs.append((center, semi))
    return blobs


def _level_function(shape, blobs) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")
    level = np.full(shape, -np.inf)
    for center, semi in blobs:
        q = (
            ((zz - center[0]) / semi[0]) ** 2
            + ((yy - center[1]) / semi[1]) ** 2
            + ((xx - center[2]) / semi[2]) ** 2
        )
        np.maximum(level, 1.0 - q, out=level)
    return level


def generate(spec: SynthSpec) -> Sample:
    """Sample a (image, label) pair; identical spec gives bitwise-equal output."""
    if min(spec.shape) < 8:
        raise ValueError(f"volume {spec.shape} too small for blob synthesis")
    rng = np.random.default_rng(spec.seed)
    blobs = _sample_blobs(rng, spec)
    if any((semi >= np.array(spec.shape) / 2).any() for _, semi in blobs):
        raise ValueError("blob larger than volume")
    level = _level_function(spec.shape, blobs)

    if spec.boundary_noise_amp > 0:
        deform = _smooth_field(rng, spec.shape, coarse=(5, 5, 5)).astype(np.float64)
        # convert voxel-scale deformation to level units via the typical edge slope
        mean_semi = float(np.mean([s for _, s in blobs]))
        level = level + deform * spec.boundary_noise_amp * (2.0 / mean_semi)
    else:
        _smooth_field(rng, spec.shape, coarse=(5, 5, 5))  # keep the draw order fixed

    label = (level > 0).astype(np.uint8)
    if not label.any() or label.all():
        raise ValueError("degenerate spec: mask must contain foreground and background")

    background = spec.background_amp * _smooth_field(rng, spec.shape, coarse=(3, 3, 3))
    soft = ndimage.gaussian_filter(label.astype(np.float32), sigma=1.0)
    noise = spec.intensity_noise_sd * rng.standard_normal(spec.shape)
    image = (background + spec.foreground_contrast * soft + noise).astype(np.float32)
    return Sample(image=image, label=label, id=f"synth-{spec.seed:016x}")


def crop_and_resize(s: Sample, target: tuple[int, int, int],
                    extension_lo: int, extension_hi: int,
                    rng: np.random.Generator) -> Sample:
    """Label-bounding-box crop with random per-face dilation, then resize.

    The image is resized trilinearly and z-scored over the crop; the mask is
    resized nearest-neighbor so it stays binary.
    """
    if s.label is None:
        raise ValueError("crop_and_resize needs a labeled sample")
    coords = np.argwhere(s.label)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    ext = rng.integers(extension_lo, extension_hi + 1, size=6)
    lo = np.maximum(lo - ext[:3], 0)
    hi = np.minimum(hi + ext[3:], np.array(s.label.shape))
    img = s.image[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    lab = s.label[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]

    src_coords = [
        (np.arange(t) + 0.5) * (c / t) - 0.5
        for t, c in zip(target, img.shape)
    ]
    zz, yy, xx = np.meshgrid(*src_coords, indexing="ij")
    image = ndimage.map_coordinates(img.astype(np.float64), [zz, yy, xx], order=1, mode="nearest")
    label = ndimage.map_coordinates(lab, [zz, yy, xx], order=0, mode="nearest").astype(np.uint8)

    mean = image.mean()
    sd = image.std()
    image = (image - mean) / max(sd, 1e-8)
    return Sample(image=image.astype(np.float32), label=label, id=s.id)


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random axis flips plus an in-plane right-angle rotation.

    The identical transform is applied to image and label. Non-square
    in-plane shapes only rotate by multiples of 180 degrees.
    """
    flips = rng.random(3) < 0.5
    k = int(rng.integers(0, 4))
    if s.image.shape[1] != s.image.shape[2] and k % 2 == 1:
        k = (k + 1) % 4

    def apply(arr):
        out = arr
        for axis in range(3):
            if flips[axis]:
                out = np.flip(out, axis=axis)
        out = np.rot90(out, k=k, axes=(1, 2))
        return np.ascontiguousarray(out)

    label = apply(s.label) if s.label is not None else None
    return Sample(image=apply(s.image), label=label, id=s.id)


# ---------------------------------------------------------------------------
# Dataset generation and manifests
# ---------------------------------------------------------------------------

def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def make_sample(seed: int, index: int, target: tuple[int, int, int]) -> Sample:
    """One randomized dataset sample: oversized synthesis, crop, resize, z-score."""
    child = _child_seed(seed, index)
    meta_rng = np.random.default_rng(child)
    canvas = tuple(int(round(t * 1.5)) for t in target)
    spec = SynthSpec(
        shape=canvas,
        seed=_child_seed(child, 1),
        blob_count=int(meta_rng.integers(1, 4)),
        boundary_noise_amp=float(meta_rng.uniform(0.5, 2.0)),
        intensity_noise_sd=float(meta_rng.uniform(0.15, 0.35)),
        foreground_contrast=float(meta_rng.uniform(1.0, 1.6)),
        background_amp=0.25,
    )
    sample = generate(spec)
    sample = crop_and_resize(sample, target, 1, 11, meta_rng)
    return Sample(image=sample.image, label=sample.label, id=f"sample-{index:04d}")


def write_dataset(out_dir: str | Path, count: int, shape: tuple[int, int, int],
                  seed: int, manifest_name: str = "manifest.json",
                  start_index: int = 0) -> Path:
    """Write ``count`` samples and a manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(start_index, start_index + count):
        sample = make_sample(seed, i, shape)
        image_name = f"{sample.id}_image"
        label_name = f"{sample.id}_label"
        write_volume(sample.image, out / image_name, role="image")
        write_volume(sample.label.astype(np.float32), out / label_name, role="mask")
        entries.append({
            "id": sample.id,
            "image": f"{image_name}.json",
            "label": f"{label_name}.json",
        })
    manifest = out / manifest_name
    manifest.write_text(json.dumps({"samples": entries}, indent=2))
    return manifest


def load_manifest(path: str | Path) -> list[Sample]:
    """Load every sample named by a manifest (labels optional)."""
    p = Path(path)
    doc = json.loads(p.read_text())
    samples = []
    for entry in doc["samples"]:
        image = read_volume(p.parent / entry["image"]).data
        label = None
        if entry.get("label"):
            label = read_volume(p.parent / entry["label"]).data.astype(np.uint8)
        samples.append(Sample(image=image, label=label, id=entry["id"]))
    return samples
