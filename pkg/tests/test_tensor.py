import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from streamattn.exceptions import FormatError, NonFiniteError, ShapeError
from streamattn.tensor import matmul_transposed, read_qkv, stable_softmax_row, write_qkv


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            s = 0.0
            for c in range(a.shape[1]):
                s += float(a[i, c]) * float(b[j, c])
            out[i, j] = s
    return out


def test_matmul_orthogonal():
    assert matmul_transposed([[1, 0]], [[0, 1]]).tolist() == [[0.0]]


def test_matmul_identity():
    np.testing.assert_array_equal(matmul_transposed(np.eye(2), np.eye(2)), np.eye(2))


def test_matmul_vs_triple_loop(rng):
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((5, 4)).astype(np.float32)
    out = matmul_transposed(a, b)
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, triple_loop(a, b), atol=1e-6)


def test_matmul_large_relative(rng):
    a = rng.standard_normal((256, 64)).astype(np.float32)
    b = rng.standard_normal((256, 64)).astype(np.float32)
    ref = a.astype(np.longdouble) @ b.astype(np.longdouble).T
    np.testing.assert_allclose(matmul_transposed(a, b), ref.astype(np.float64), rtol=1e-5, atol=1e-5)


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul_transposed(np.ones((2, 3)), np.ones((2, 4)))


def test_softmax_uniform():
    np.testing.assert_allclose(stable_softmax_row([0, 0, 0]), [1 / 3] * 3, atol=1e-15)


def test_softmax_no_overflow():
    out = stable_softmax_row([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_vs_mpmath():
    mpmath.mp.prec = 128
    logits = [1, 2, 3]
    ex = [mpmath.exp(x) for x in logits]
    ref = [float(e / mpmath.fsum(ex)) for e in ex]
    np.testing.assert_allclose(stable_softmax_row(logits), ref, atol=1e-6, rtol=0)


@pytest.mark.parametrize("bad", [[], [1.0, float("nan")], [float("inf"), 0.0]])
def test_softmax_rejects(bad):
    with pytest.raises((ShapeError, NonFiniteError)):
        stable_softmax_row(bad)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e4, 1e4)))
def test_softmax_is_probability_vector(x):
    p = stable_softmax_row(x)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-6
    # order preserving
    i, j = np.argmax(x), np.argmin(x)
    if x[i] > x[j]:
        assert p[i] >= p[j]


def test_qkv_roundtrip(tmp_path, rng):
    m = rng.standard_normal((7, 3)).astype(np.float32)
    path = tmp_path / "m.qkv"
    write_qkv(path, m)
    blob = path.read_bytes()
    assert blob[:4] == b"QKV1"
    assert struct.unpack("<III", blob[4:16]) == (2, 7, 3)
    assert len(blob) == 16 + 7 * 3 * 4
    np.testing.assert_array_equal(read_qkv(path), m)


def _write(path, blob):
    path.write_bytes(blob)
    return path


@pytest.mark.parametrize("blob", [
    b"QKV2" + struct.pack("<III", 2, 1, 1) + struct.pack("<f", 1.0),
    b"QKV1" + struct.pack("<III", 3, 1, 1) + struct.pack("<f", 1.0),
    b"QKV1" + struct.pack("<III", 2, 2, 2) + struct.pack("<f", 1.0),
    b"QKV1" + struct.pack("<II", 2, 2),
    b"QKV1" + struct.pack("<III", 2, 1, 1) + struct.pack("<f", float("nan")),
    b"QKV1" + struct.pack("<III", 2, 1, 1) + struct.pack("<f", float("inf")),
])
def test_qkv_rejects(tmp_path, blob):
    with pytest.raises(FormatError):
        read_qkv(_write(tmp_path / "bad.qkv", blob))
