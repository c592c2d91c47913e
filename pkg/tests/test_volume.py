import json

import numpy as np
import pytest

from ivseg.volume import (
    HeaderError,
    PayloadSizeError,
    Shape3,
    ValidationError,
    Volume,
    elementwise_clip,
    flat_index,
    load_checkpoint,
    read_volume,
    save_checkpoint,
    write_volume,
)


def test_zero_payload_roundtrip(tmp_path):
    write_volume(np.zeros((2, 2, 2), np.float32), tmp_path / "v")
    v = read_volume(tmp_path / "v")
    assert v.shape3 == Shape3(2, 2, 2)
    assert not v.data.any()
    assert (tmp_path / "v.raw").stat().st_size == 32


def test_identity_roundtrip(tmp_path):
    data = np.array([0.1, 0.2, 0.3], np.float32).reshape(1, 1, 3)
    write_volume(data, tmp_path / "v")
    assert np.array_equal(read_volume(tmp_path / "v").data, data)


def test_random_roundtrip_bitexact(tmp_path):
    # Round-trip oracle: write then read must reproduce the payload bitwise.
    rng = np.random.default_rng(0)
    for i in range(1000):
        shape = tuple(rng.integers(1, 6, size=3))
        data = rng.standard_normal(shape).astype(np.float32)
        write_volume(data, tmp_path / f"v{i}")
        back = read_volume(tmp_path / f"v{i}").data
        assert back.tobytes() == data.tobytes()


def test_write_rejects_nan(tmp_path):
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        write_volume(data, tmp_path / "v")


def test_role_validation(tmp_path):
    with pytest.raises(ValidationError):
        Volume(np.full((1, 1, 2), 1.5, np.float32), role="prob")
    with pytest.raises(ValidationError):
        Volume(np.full((1, 1, 2), 0.5, np.float32), role="mask")
    write_volume(np.ones((1, 1, 2), np.float32), tmp_path / "m", role="mask")
    assert read_volume(tmp_path / "m").role == "mask"


def test_read_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nope")
    (tmp_path / "bad.json").write_text("{not json")
    (tmp_path / "bad.raw").write_bytes(b"\0" * 4)
    with pytest.raises(HeaderError):
        read_volume(tmp_path / "bad")
    (tmp_path / "short.json").write_text(
        json.dumps({"shape": [2, 2, 2], "dtype": "f32", "order": "zyx", "role": "image"})
    )
    (tmp_path / "short.raw").write_bytes(b"\0" * 16)
    with pytest.raises(PayloadSizeError):
        read_volume(tmp_path / "short")


def test_clip_examples():
    v = np.array([-0.2, 0.5, 1.3], np.float32).reshape(1, 1, 3)
    out = elementwise_clip(v, 0.0, 1.0)
    assert np.array_equal(out.ravel(), np.array([0.0, 0.5, 1.0], np.float32))
    wide = elementwise_clip(v, -1e9, 1e9)
    assert np.array_equal(wide, v)
    with pytest.raises(ValidationError):
        elementwise_clip(v, 1.0, 0.0)


def test_clip_idempotent_and_contained():
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.normal(scale=2.0, size=(4, 5, 6)).astype(np.float32)
        once = elementwise_clip(v, 0.0, 1.0)
        assert once.min() >= 0.0 and once.max() <= 1.0
        assert np.array_equal(elementwise_clip(once, 0.0, 1.0), once)
        inside = (v >= 0.0) & (v <= 1.0)
        assert np.array_equal(once[inside], v[inside])


def test_zmajor_flat_index():
    shape = Shape3(3, 4, 5)
    data = np.arange(shape.voxels, dtype=np.float32).reshape(shape)
    for z in range(3):
        for y in range(4):
            for x in range(5):
                assert data.ravel()[flat_index(z, y, x, shape)] == data[z, y, x]


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {
        "a.w": rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32),
        "a.b": np.zeros(3, np.float32),
        "scalarish": rng.standard_normal((1,)).astype(np.float32),
    }
    meta = {"epoch": 7, "note": "x"}
    save_checkpoint(tmp_path / "c.ckpt", tensors, meta)
    back, meta2 = load_checkpoint(tmp_path / "c.ckpt")
    assert meta2 == meta
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_truncated(tmp_path):
    save_checkpoint(tmp_path / "c.ckpt", {"t": np.ones((4,), np.float32)})
    raw = (tmp_path / "c.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:-4])
    with pytest.raises(PayloadSizeError):
        load_checkpoint(tmp_path / "bad.ckpt")
