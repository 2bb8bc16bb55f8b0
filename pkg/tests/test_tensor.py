import os
import struct

import numpy as np
import pytest

from dropclass import tensor
from dropclass.errors import DimensionError, FormatError, NonFiniteError


# ---------------------------------------------------------------------------
# coercion and finiteness
# ---------------------------------------------------------------------------

def test_as_f32_contiguous():
    x = np.arange(12, dtype=np.float64).reshape(3, 4)[:, ::2]
    y = tensor.as_f32(x)
    assert y.dtype == np.float32
    assert y.flags["C_CONTIGUOUS"]
    assert np.array_equal(y, x.astype(np.float32))


def test_check_finite_passes_through():
    x = np.ones((2, 2), dtype=np.float32)
    assert tensor.check_finite(x) is x


def test_check_finite_rejects_nan_and_inf():
    with pytest.raises(NonFiniteError):
        tensor.check_finite(np.array([1.0, np.nan]))
    with pytest.raises(NonFiniteError, match="activations"):
        tensor.check_finite(np.array([np.inf]), "activations")


# ---------------------------------------------------------------------------
# tensor file format
# ---------------------------------------------------------------------------

def test_tensor_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 3)).astype(np.float32)
    p = tmp_path / "x.dct1"
    tensor.save_tensor(x, p)
    y = tensor.load_tensor(p)
    assert y.dtype == np.float32
    assert y.shape == (4, 5, 3)
    assert np.array_equal(x, y)


def test_tensor_bytes_layout():
    x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    blob = tensor.tensor_bytes(x)
    assert blob[:4] == b"DCT1"
    rank = struct.unpack("<I", blob[4:8])[0]
    assert rank == 2
    assert struct.unpack("<2I", blob[8:16]) == (2, 2)
    assert np.frombuffer(blob, dtype="<f4", offset=16).tolist() == [1.0, 2.0, 3.0, 4.0]


def test_load_tensor_rank_zero(tmp_path):
    # handcrafted rank-0 file: header with no dims, one float payload
    blob = b"DCT1" + struct.pack("<I", 0) + struct.pack("<f", 7.5)
    p = tmp_path / "s.dct1"
    p.write_bytes(blob)
    y = tensor.load_tensor(p)
    assert y.shape == ()
    assert y == np.float32(7.5)


def test_save_tensor_rejects_nonfinite(tmp_path):
    with pytest.raises(NonFiniteError):
        tensor.save_tensor(np.array([np.nan]), tmp_path / "bad.dct1")
    assert not (tmp_path / "bad.dct1").exists()


def test_load_tensor_bad_magic(tmp_path):
    p = tmp_path / "x.dct1"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError, match="bad magic"):
        tensor.load_tensor(p)


def test_load_tensor_truncated_payload(tmp_path):
    x = np.ones((8, 8), dtype=np.float32)
    blob = tensor.tensor_bytes(x)
    p = tmp_path / "x.dct1"
    p.write_bytes(blob[:-4])
    with pytest.raises(FormatError, match="payload"):
        tensor.load_tensor(p)


def test_load_tensor_truncated_dims(tmp_path):
    p = tmp_path / "x.dct1"
    p.write_bytes(b"DCT1" + struct.pack("<I", 3) + struct.pack("<I", 2))
    with pytest.raises(FormatError, match="truncated dims"):
        tensor.load_tensor(p)


def test_load_tensor_implausible_rank(tmp_path):
    p = tmp_path / "x.dct1"
    p.write_bytes(b"DCT1" + struct.pack("<I", 99) + b"\x00" * 64)
    with pytest.raises(FormatError, match="rank"):
        tensor.load_tensor(p)


def test_load_tensor_rejects_nonfinite_payload(tmp_path):
    x = np.array([1.0, np.inf], dtype=np.float32)
    blob = tensor._pack_header(tensor.TENSOR_MAGIC, x.shape) + x.astype("<f4").tobytes()
    p = tmp_path / "x.dct1"
    p.write_bytes(blob)
    with pytest.raises(NonFiniteError):
        tensor.load_tensor(p)


# ---------------------------------------------------------------------------
# label file format
# ---------------------------------------------------------------------------

def test_labels_roundtrip(tmp_path):
    labels = np.array([[0, 1, 255], [2, 3, 0]], dtype=np.uint8)
    p = tmp_path / "y.dcl1"
    tensor.save_labels(labels, p)
    back = tensor.load_labels(p)
    assert back.dtype == np.uint8
    assert np.array_equal(back, labels)


def test_labels_magic_mismatch_with_tensor(tmp_path):
    p = tmp_path / "y.dcl1"
    tensor.save_labels(np.zeros((2, 2), dtype=np.uint8), p)
    with pytest.raises(FormatError, match="bad magic"):
        tensor.load_tensor(p)


def test_save_labels_rejects_floats(tmp_path):
    with pytest.raises(DimensionError):
        tensor.save_labels(np.zeros((2, 2), dtype=np.float32), tmp_path / "y.dcl1")


def test_labels_truncated_payload(tmp_path):
    blob = tensor.label_bytes(np.zeros((4, 4), dtype=np.uint8))
    p = tmp_path / "y.dcl1"
    p.write_bytes(blob[:-1])
    with pytest.raises(FormatError, match="payload"):
        tensor.load_labels(p)


def test_ignore_label_value():
    assert tensor.IGNORE_LABEL == 255


# ---------------------------------------------------------------------------
# atomic writes
# ---------------------------------------------------------------------------

def test_atomic_write_replaces_existing(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("old")
    tensor.atomic_write_text(p, "new")
    assert p.read_text() == "new"
    # no temp files left behind
    assert os.listdir(tmp_path) == ["f.txt"]


def test_atomic_write_cleans_up_on_failure(tmp_path, monkeypatch):
    p = tmp_path / "f.bin"

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        tensor.atomic_write_bytes(p, b"data")
    monkeypatch.undo()
    assert os.listdir(tmp_path) == []
