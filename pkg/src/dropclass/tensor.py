"""Dense float32 tensors and their on-disk formats.

Tensors are plain numpy arrays in row-major order. Image-like data is laid
out [height, width, channels]; batched data gets a leading batch dimension.

File formats (both little-endian):

  .dct1  float tensor   magic "DCT1" | u32 rank | rank * u32 dims | f32 data
  .dcl1  label map      magic "DCL1" | u32 rank | rank * u32 dims | u8 data

Label value 255 marks pixels to ignore in losses and metrics.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DimensionError, FormatError, NonFiniteError

IGNORE_LABEL = 255

TENSOR_MAGIC = b"DCT1"
LABEL_MAGIC = b"DCL1"


def as_f32(values) -> np.ndarray:
    """Coerce to a C-contiguous float32 array."""
    return np.ascontiguousarray(values, dtype=np.float32)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    """Raise NonFiniteError if arr holds NaN or Inf; returns arr unchanged."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr


def _pack_header(magic: bytes, shape: tuple[int, ...]) -> bytes:
    return magic + struct.pack("<I", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)


def _unpack_header(blob: bytes, magic: bytes, path) -> tuple[tuple[int, ...], int]:
    if blob[:4] != magic:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack("<I", blob[4:8])
    if rank > 8:
        raise FormatError(f"{path}: implausible rank {rank}")
    end = 8 + 4 * rank
    if len(blob) < end:
        raise FormatError(f"{path}: truncated dims")
    shape = struct.unpack(f"<{rank}I", blob[8:end])
    return shape, end


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename so readers never see a partial file."""
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = as_f32(arr)
    return _pack_header(TENSOR_MAGIC, arr.shape) + arr.astype("<f4").tobytes()


def save_tensor(arr: np.ndarray, path) -> None:
    check_finite(np.asarray(arr), "tensor being saved")
    atomic_write_bytes(path, tensor_bytes(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    shape, offset = _unpack_header(blob, TENSOR_MAGIC, path)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(blob, dtype="<f4", offset=offset)
    if data.size != count:
        raise FormatError(f"{path}: payload holds {data.size} floats, dims give {count}")
    arr = data.reshape(shape).astype(np.float32)
    return check_finite(arr, f"tensor loaded from {path}")


def label_bytes(labels: np.ndarray) -> bytes:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    return _pack_header(LABEL_MAGIC, labels.shape) + labels.tobytes()


def save_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.dtype.kind not in "ui":
        raise DimensionError("label map must hold integer class indices")
    atomic_write_bytes(path, label_bytes(labels))


def load_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    shape, offset = _unpack_header(blob, LABEL_MAGIC, path)
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    data = np.frombuffer(blob, dtype=np.uint8, offset=offset)
    if data.size != count:
        raise FormatError(f"{path}: payload holds {data.size} bytes, dims give {count}")
    return data.reshape(shape).copy()
