"""Dense numeric substrate.

A "matrix" throughout the package is a 2-D, C-contiguous ``float32`` numpy
array. Reductions are accumulated in ``float64``.
"""
import struct

import numpy as np

from .exceptions import FormatError, NonFiniteError, ShapeError

MAGIC = b"QKV1"


def as_matrix(x, name="matrix", cols=None):
    """Validate ``x`` as a finite 2-D array and return it as float32."""
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise ShapeError(f"{name} has {arr.shape[1]} columns, expected {cols}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def matmul_transposed(a, b):
    """Return ``a @ b.T`` accumulated in float64 and stored as float32."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cannot multiply {a.shape} by transpose of {b.shape}")
    out = a.astype(np.float64) @ b.astype(np.float64).T
    return out.astype(np.float32)


def stable_softmax_row(logits):
    """Max-shifted softmax of a 1-D vector, returned in float64."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ShapeError("softmax needs a non-empty 1-D vector")
    if np.isnan(x).any():
        raise NonFiniteError("softmax input contains NaN")
    if not np.isfinite(x).all():
        raise NonFiniteError("softmax input contains Inf")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax_rows(logits):
    """Row-wise stable softmax of a float64 2-D array (no validation)."""
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    e /= e.sum(axis=1, keepdims=True)
    return e


def write_qkv(path, matrix):
    m = as_matrix(matrix)
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", 2, rows, cols))
        fh.write(m.astype("<f4").tobytes())


def read_qkv(path):
    """Read a QKV1 file, rejecting bad magic, bad rank, truncation and NaN/Inf."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank != 2:
        raise FormatError(f"{path}: rank {rank} unsupported (expected 2)")
    if len(blob) < 8 + 4 * rank:
        raise FormatError(f"{path}: truncated dims")
    rows, cols = struct.unpack_from("<II", blob, 8)
    payload = blob[16:]
    if len(payload) != rows * cols * 4:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {rows * cols * 4}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite values")
    return np.ascontiguousarray(data, dtype=np.float32)
