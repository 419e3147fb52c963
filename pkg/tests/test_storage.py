"""Round-trip and validation tests for the binary containers."""

import numpy as np
import pytest

from lsaf import storage
from lsaf.errors import FormatError


def test_raster_round_trip_is_byte_exact(tmp_path):
    cube = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    p1, p2 = tmp_path / "a.lsaf", tmp_path / "b.lsaf"
    storage.write_raster(p1, cube)
    back = storage.read_raster(p1)
    assert np.array_equal(back, cube)
    storage.write_raster(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_zero_raster_loads_as_zeros(tmp_path):
    path = tmp_path / "z.lsaf"
    storage.write_raster(path, np.zeros((3, 2, 2), dtype=np.float32))
    assert not storage.read_raster(path).any()


def test_labels_round_trip(tmp_path):
    labels = np.random.default_rng(1).integers(0, 16, size=(7, 9)).astype(np.uint16)
    path = tmp_path / "gt.lsaf"
    storage.write_labels(path, labels)
    assert np.array_equal(storage.read_labels(path), labels)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "short.lsaf"
    storage.write_raster(path, np.ones((2, 3, 3), dtype=np.float32))
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError, match="bytes"):
        storage.read_raster(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "long.lsaf"
    storage.write_raster(path, np.ones((1, 2, 2), dtype=np.float32))
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError):
        storage.probe_raster(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.lsaf"
    storage.write_raster(path, np.ones((1, 2, 2), dtype=np.float32))
    blob = bytearray(path.read_bytes())
    blob[:4] = b"WHAT"
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        storage.probe_raster(path)


def test_full_scene_header_probe_without_payload_read(tmp_path):
    """A header-sized probe must handle a full 144-band scene file; the
    payload is sparse on disk, so actually reading it would be obvious."""
    path = tmp_path / "scene.lsaf"
    bands, height, width = 144, 349, 1905
    with open(path, "wb") as f:
        import struct

        f.write(struct.pack("<4sIIIIB", b"LSAF", 1, bands, height, width, 1))
        f.truncate(21 + bands * height * width * 4)
    info = storage.probe_raster(path)
    assert (info["bands"], info["height"], info["width"]) == (bands, height, width)
    assert info["dtype"] == np.dtype("<f4")


def test_checkpoint_round_trip_byte_exact(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {
        "hsi.conv1.kernels": rng.normal(size=(8, 1, 7, 3, 3)),
        "fusion.weight_hsi": np.array(1.0),
        "pre.pca.mean": rng.normal(size=30).astype(np.float32),
    }
    p1, p2 = tmp_path / "w1.lsfw", tmp_path / "w2.lsfw"
    storage.write_checkpoint(p1, tensors)
    loaded = storage.read_checkpoint(p1)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == np.asarray(tensors[name]).dtype
    storage.write_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "w.lsfw"
    storage.write_checkpoint(path, {"a": np.zeros(2)})
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="magic"):
        storage.read_checkpoint(path)


def test_checkpoint_truncation_detected(tmp_path):
    path = tmp_path / "w.lsfw"
    storage.write_checkpoint(path, {"a": np.zeros(8)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated"):
        storage.read_checkpoint(path)


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(3).integers(0, 256, size=(5, 8, 3)).astype(np.uint8)
    path = tmp_path / "map.ppm"
    storage.write_ppm(path, rgb)
    assert np.array_equal(storage.read_ppm(path), rgb)
    header = path.read_bytes()[:15]
    assert header.startswith(b"P6\n8 5\n255\n")
