"""Dense 3D volume types, shape arithmetic and bit-exact file IO.

Conventions shared by every module in this package:

  - a volume is a float32 numpy array of shape (D, H, W), z-major, so the
    flat index of voxel (z, y, x) is ``(z * H + y) * W + x`` and axial
    slices are contiguous;
  - a binary mask is a uint8 array of the same shape with values {0, 1};
  - volumes written to disk are a ``<name>.json`` / ``<name>.raw`` pair:
    the header records shape, dtype, storage order and role, the payload
    is D*H*W little-endian IEEE-754 float32 values;
  - checkpoints are a single file: one JSON manifest line (tensor names,
    shapes, byte offsets plus free-form metadata) followed by the
    concatenated little-endian float32 payloads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

VOLUME_ROLES = ("image", "prob", "mask", "hint", "conf")

# Kept in [0, 1] by validation; conf additionally lives in the open interval
# but file IO only enforces the closed bounds.
_UNIT_RANGE_ROLES = frozenset({"prob", "hint", "conf"})


class VolumeError(Exception):
    """Base class for volume IO and validation failures."""


class HeaderError(VolumeError):
    """The JSON header is missing fields, ill-typed or inconsistent."""


class PayloadSizeError(VolumeError):
    """The raw payload length does not match the header shape."""


class ValidationError(VolumeError):
    """Array contents violate the invariants of their role."""


class Shape3(NamedTuple):
    """Volume extents in z-major order (depth, height, width)."""

    depth: int
    height: int
    width: int

    @property
    def voxels(self) -> int:
        return self.depth * self.height * self.width

    def validate(self) -> "Shape3":
        if any(int(e) < 1 for e in self):
            raise ValidationError(f"all extents must be >= 1, got {tuple(self)}")
        return Shape3(int(self.depth), int(self.height), int(self.width))

    @classmethod
    def of(cls, arr: np.ndarray) -> "Shape3":
        if arr.ndim != 3:
            raise ValidationError(f"expected a 3-d array, got ndim={arr.ndim}")
        return cls(*arr.shape).validate()


@dataclass
class Volume:
    """A role-tagged dense scalar field.

    ``data`` is always float32 and C-contiguous (z-major). The same type
    carries images, probability maps, hint maps and confidence maps; the
    role tag drives validation and file headers.
    """

    data: np.ndarray
    role: str = "image"

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        Shape3.of(self.data)
        if self.role not in VOLUME_ROLES:
            raise ValidationError(f"unknown role {self.role!r}")
        validate_role(self.data, self.role)

    @property
    def shape3(self) -> Shape3:
        return Shape3.of(self.data)


def validate_role(data: np.ndarray, role: str) -> None:
    """Check the per-role invariants (finite values, ranges, binariness)."""
    if not np.isfinite(data).all():
        raise ValidationError(f"{role} volume contains non-finite values")
    if role in _UNIT_RANGE_ROLES:
        lo, hi = float(data.min()), float(data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError(f"{role} volume outside [0, 1]: min={lo}, max={hi}")
    elif role == "mask":
        bad = np.setdiff1d(np.unique(data), [0.0, 1.0])
        if bad.size:
            raise ValidationError(f"mask volume has non-binary values {bad[:4]}")


def as_mask(data: np.ndarray) -> np.ndarray:
    """Return a validated uint8 {0,1} mask view of ``data``."""
    arr = np.asarray(data)
    if arr.dtype != np.uint8:
        validate_role(arr.astype(np.float32, copy=False), "mask")
        arr = arr.astype(np.uint8)
    elif arr.size and arr.max() > 1:
        raise ValidationError("mask values must be 0 or 1")
    Shape3.of(arr)
    return arr


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def write_volume(v: Volume | np.ndarray, path: str | Path, role: str | None = None) -> None:
    """Write a volume as the ``.json``/``.raw`` pair; round trip is bit exact."""
    if isinstance(v, np.ndarray):
        v = Volume(v, role or "image")
    elif role is not None and role != v.role:
        v = Volume(v.data, role)
    validate_role(v.data, v.role)
    header_path, raw_path = _paths(path)
    shape = v.shape3
    header = {
        "shape": list(shape),
        "dtype": "f32",
        "order": "zyx",
        "role": v.role,
    }
    header_path.write_text(json.dumps(header))
    raw_path.write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> Volume:
    """Read a ``.json``/``.raw`` volume pair written by :func:`write_volume`."""
    header_path, raw_path = _paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing volume header {header_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing volume payload {raw_path}")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise HeaderError(f"unparseable header {header_path}: {e}") from e
    try:
        shape = Shape3(*(int(x) for x in header["shape"])).validate()
        dtype, order, role = header["dtype"], header["order"], header["role"]
    except (KeyError, TypeError, ValueError) as e:
        raise HeaderError(f"malformed header {header_path}: {e}") from e
    if dtype != "f32" or order != "zyx":
        raise HeaderError(f"unsupported dtype/order {dtype!r}/{order!r}")
    if role not in VOLUME_ROLES:
        raise HeaderError(f"unknown role {role!r}")
    payload = raw_path.read_bytes()
    if len(payload) != shape.voxels * 4:
        raise PayloadSizeError(
            f"{raw_path}: expected {shape.voxels * 4} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return Volume(data, role)


def elementwise_clip(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Clamp every value into [lo, hi]; values already inside are unchanged."""
    if lo > hi:
        raise ValidationError(f"clip bounds reversed: {lo} > {hi}")
    return np.clip(v, lo, hi).astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# Checkpoints: named tensor sets in a single manifest+payload file
# ---------------------------------------------------------------------------

NamedTensorSet = dict[str, np.ndarray]


def save_checkpoint(path: str | Path, tensors: NamedTensorSet, meta: dict | None = None) -> None:
    """Serialize named float32 tensors plus JSON metadata into one file."""
    entries = []
    blobs = []
    offset = 0
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"tensors": entries, "meta": meta or {}}
    with open(path, "wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path) -> tuple[NamedTensorSet, dict]:
    """Inverse of :func:`save_checkpoint`; validates offsets and sizes."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint {p}")
    with open(p, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        manifest = json.loads(line.decode("utf-8"))
        entries = manifest["tensors"]
        meta = manifest.get("meta", {})
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as e:
        raise HeaderError(f"malformed checkpoint manifest in {p}: {e}") from e
    tensors: NamedTensorSet = {}
    for entry in entries:
        try:
            name, shape, offset = entry["name"], tuple(entry["shape"]), int(entry["offset"])
        except (KeyError, TypeError) as e:
            raise HeaderError(f"malformed tensor entry {entry!r}") from e
        if name in tensors:
            raise HeaderError(f"duplicate tensor name {name!r}")
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 4
        if offset < 0 or end > len(payload):
            raise PayloadSizeError(f"tensor {name!r} spans outside the payload")
        tensors[name] = (
            np.frombuffer(payload[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        )
    return tensors, meta


def flat_index(z: int, y: int, x: int, shape: Shape3) -> int:
    """Flat position of voxel (z, y, x) in z-major storage."""
    return (z * shape.height + y) * shape.width + x
