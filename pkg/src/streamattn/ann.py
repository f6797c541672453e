"""Training-free nearest-neighbour retrieval over key vectors.

Two backends:

* ``LshIndex``: ``L`` tables of ``b`` signed random projections (cosine LSH).
  A key's signature in a table is the sign pattern of its dot products with
  that table's hyperplanes, packed into an integer.
* ``QuantIndex``: per-dimension affine scalar quantisation to ``b`` bits.
  Search runs on dequantised vectors; queries are quantised the same way.

Candidate sets are lists of sorted, unique ``int64`` index arrays.
Ties are always broken towards the lower key index.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .exceptions import ShapeError
from .tensor import as_matrix

QUANT_BITS = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class AnnConfig:
    """Backend choice plus its parameters; hashable so it can key caches."""

    kind: str = "quant"
    bits: int = 8
    tables: int = 8
    hash_bits: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("lsh", "quant"):
            raise ValueError(f"unknown ANN backend {self.kind!r}")
        if self.kind == "quant" and self.bits not in QUANT_BITS:
            raise ValueError(f"bits must be one of {QUANT_BITS}, got {self.bits}")
        if self.kind == "lsh":
            if self.tables < 1:
                raise ValueError("LSH needs at least one table")
            if not 1 <= self.hash_bits <= 30:
                raise ValueError("LSH hash_bits must be in [1, 30]")

    def build(self, keys):
        if self.kind == "lsh":
            return build_lsh(keys, self.tables, self.hash_bits, self.seed)
        return build_quant(keys, self.bits)


# --------------------------------------------------------------------- LSH


def make_hyperplanes(d, tables, bits, seed):
    """``(tables, bits, d)`` unit normals, reproducible from ``seed``."""
    rng = np.random.default_rng(seed)
    planes = rng.standard_normal((tables, bits, d))
    planes /= np.linalg.norm(planes, axis=2, keepdims=True)
    return planes


def lsh_signatures(hyperplanes, x):
    """Integer signature of every row of ``x`` in every table: ``(n, tables)``."""
    x = np.asarray(x, dtype=np.float64)
    tables, bits, d = hyperplanes.shape
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"expected rows of dim {d}, got {x.shape}")
    proj = np.einsum("nd,tbd->ntb", x, hyperplanes)
    weights = np.int64(1) << np.arange(bits, dtype=np.int64)
    return ((proj >= 0).astype(np.int64) * weights).sum(axis=2)


@dataclass
class LshIndex:
    keys: np.ndarray
    tables: int
    bits_per_table: int
    seed: int
    hyperplanes: np.ndarray
    signatures: np.ndarray
    buckets: List[Dict[int, np.ndarray]] = field(default_factory=list)

    @property
    def size(self):
        return self.keys.shape[0]

    @property
    def dim(self):
        return self.keys.shape[1]


def build_lsh(keys, tables=8, bits=10, seed=0):
    keys = as_matrix(keys, "keys")
    if tables < 1:
        raise ValueError("tables must be >= 1")
    if not 1 <= bits <= 30:
        raise ValueError("bits must be in [1, 30]")
    planes = make_hyperplanes(keys.shape[1], tables, bits, seed)
    sigs = lsh_signatures(planes, keys)
    buckets = []
    for t in range(tables):
        col = sigs[:, t]
        order = np.argsort(col, kind="stable")
        uniq, starts = np.unique(col[order], return_index=True)
        parts = np.split(order, starts[1:]) if order.size else []
        buckets.append({int(s): p for s, p in zip(uniq, parts)})
    return LshIndex(keys, tables, bits, seed, planes, sigs, buckets)


def lsh_candidates(index, queries, query_signatures=None):
    """Union over tables of the bucket each query hashes to.

    ``query_signatures`` lets a caller reuse signatures already computed with
    the same hyperplanes.
    """
    queries = as_matrix(queries, "queries", cols=index.dim)
    if query_signatures is None:
        query_signatures = lsh_signatures(index.hyperplanes, queries)
    empty = np.empty(0, dtype=np.int64)
    out = []
    for sig_row in query_signatures:
        parts = [index.buckets[t].get(int(s), empty) for t, s in enumerate(sig_row)]
        out.append(np.unique(np.concatenate(parts)) if parts else empty)
    return out


# ------------------------------------------------------------ quantisation


@dataclass
class QuantIndex:
    bits: int
    scale: np.ndarray
    zero_point: np.ndarray
    codes: np.ndarray
    constant_dims: np.ndarray  # flagged dimensions where max == min

    @property
    def size(self):
        return self.codes.shape[0]

    @property
    def dim(self):
        return self.codes.shape[1]

    def dequantize(self):
        return dequantize(self.codes, self.scale, self.zero_point, self.bits)


def quantize(x, bits):
    """Fit per-dimension affine quantisation to ``x``.

    Returns ``(codes, scale, zero_point, constant_dims)``. With ``bits=32``
    the codes are the raw float32 values and scale is 1.
    """
    if bits not in QUANT_BITS:
        raise ValueError(f"bits must be one of {QUANT_BITS}, got {bits}")
    x = np.asarray(x, dtype=np.float32)
    d = x.shape[1]
    if bits == 32:
        return x.copy(), np.ones(d), np.zeros(d), np.zeros(d, dtype=bool)
    if x.shape[0] == 0:
        return (np.empty((0, d), dtype=np.uint32), np.ones(d), np.zeros(d),
                np.zeros(d, dtype=bool))
    x64 = x.astype(np.float64)
    lo = x64.min(axis=0)
    hi = x64.max(axis=0)
    levels = (1 << bits) - 1
    constant = hi == lo
    scale = np.where(constant, 1.0, (hi - lo) / levels)
    codes = np.rint((x64 - lo) / scale)
    codes[:, constant] = 0
    codes = np.clip(codes, 0, levels).astype(np.uint32)
    return codes, scale, lo, constant


def dequantize(codes, scale, zero_point, bits):
    if bits == 32:
        return codes.astype(np.float64)
    return codes.astype(np.float64) * scale + zero_point


def build_quant(keys, bits=8):
    keys = as_matrix(keys, "keys")
    codes, scale, zero, constant = quantize(keys, bits)
    return QuantIndex(bits, scale, zero, codes, constant)


def topk_indices(scores, k):
    """Indices of the ``k`` largest scores, lower index first on ties, sorted."""
    n = scores.shape[0]
    if k >= n:
        return np.arange(n, dtype=np.int64)
    kth = np.partition(scores, n - k)[n - k]
    above = np.flatnonzero(scores > kth)
    tied = np.flatnonzero(scores == kth)[: k - above.size]
    return np.sort(np.concatenate([above, tied])).astype(np.int64)


def quant_scores(index, queries):
    queries = as_matrix(queries, "queries", cols=index.dim)
    qc, qs, qz, _ = quantize(queries, index.bits)
    q_hat = dequantize(qc, qs, qz, index.bits)
    return q_hat @ index.dequantize().T


def quant_topk(index, queries, k):
    """Top-``k`` keys per query by dot product in the dequantised space."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = quant_scores(index, queries)
    return [topk_indices(row, k) for row in scores]


# ------------------------------------------------------------------- top-1


def top1_neighbor(index, queries):
    """Best key per query, or ``None`` when the query has no candidates.

    LSH: exact dot-product argmax within the query's candidate set.
    Quant: argmax of the dequantised dot product.
    """
    if isinstance(index, LshIndex):
        queries = as_matrix(queries, "queries", cols=index.dim)
        cands = lsh_candidates(index, queries)
        keys = index.keys.astype(np.float64)
        out: List[Optional[int]] = []
        for q, c in zip(queries.astype(np.float64), cands):
            if c.size == 0:
                out.append(None)
            else:
                out.append(int(c[np.argmax(keys[c] @ q)]))
        return out
    if index.size == 0:
        return [None] * np.asarray(queries).shape[0]
    scores = quant_scores(index, queries)
    return [int(i) for i in np.argmax(scores, axis=1)]
