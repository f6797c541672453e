"""Exact dense attention and redundancy-free grouped attention.

Grouped attention evaluates softmax attention over ``g`` representative keys,
each standing for ``m_t`` identical original keys. Adding ``ln(m_t)`` to the
representative's logit and pairing it with the group's mean value reproduces
attention over the expanded key set exactly.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import EmptyContextError, InvariantError, ShapeError
from .tensor import as_matrix, softmax_rows


@dataclass(frozen=True)
class AttentionOutput:
    output: np.ndarray
    weights: Optional[np.ndarray] = None  # float64, only when requested


@dataclass(frozen=True)
class GroupedKV:
    """Compressed key/value set.

    ``assignment[i]`` is the group that original row ``i`` was folded into,
    when the grouping came from :func:`group_duplicates`.
    """

    rep_keys: np.ndarray
    mean_values: np.ndarray
    multiplicities: np.ndarray
    assignment: Optional[np.ndarray] = None
    zero_norm_keys: int = 0

    def __post_init__(self):
        g = self.rep_keys.shape[0]
        if self.mean_values.shape[0] != g or self.multiplicities.shape[0] != g:
            raise InvariantError(
                "rep_keys, mean_values and multiplicities must have the same length"
            )
        if np.any(self.multiplicities <= 0):
            raise InvariantError("multiplicities must be positive")

    @property
    def groups(self):
        return self.rep_keys.shape[0]


def _check_qkv(q, k, v):
    q = as_matrix(q, "queries")
    k = as_matrix(k, "keys")
    v = as_matrix(v, "values")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if k.shape[0] == 0:
        raise EmptyContextError("empty context: attention over zero keys")
    return q, k, v


def attend_rows(q, k, v, bias=None):
    """Shared float64 kernel: softmax(q k^T / sqrt(d) + bias) v.

    Returns ``(output_f64, weights_f64)``. Inputs are not validated.
    """
    scale = 1.0 / np.sqrt(q.shape[1])
    logits = (q.astype(np.float64) @ k.astype(np.float64).T) * scale
    if bias is not None:
        logits += bias
    weights = softmax_rows(logits)
    return weights @ v.astype(np.float64), weights


def dense_attention(q, k, v, want_weights=False):
    q, k, v = _check_qkv(q, k, v)
    out, weights = attend_rows(q, k, v)
    return AttentionOutput(out.astype(np.float32), weights if want_weights else None)


def grouped_attention(q, g, want_weights=False, log_bias=True):
    """Attention over a :class:`GroupedKV` with the ``+ln(m)`` logit bias.

    ``log_bias=False`` drops the bias; it exists only as a fault-injection
    hook for negative-control checks.
    """
    q = as_matrix(q, "queries")
    if q.shape[1] != g.rep_keys.shape[1]:
        raise ShapeError(f"query dim {q.shape[1]} != key dim {g.rep_keys.shape[1]}")
    if g.groups == 0:
        raise EmptyContextError("empty context: no groups")
    mult = np.asarray(g.multiplicities, dtype=np.float64)
    if np.any(mult <= 0):
        raise InvariantError("multiplicities must be positive")
    bias = np.log(mult)[None, :] if log_bias else None
    out, weights = attend_rows(q, g.rep_keys, g.mean_values, bias)
    return AttentionOutput(out.astype(np.float32), weights if want_weights else None)


def _cosine_to_reps(key, key_norm, reps, rep_norms):
    denom = rep_norms * key_norm
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = (reps @ key) / denom
    cos[denom == 0] = -np.inf
    return cos


def group_duplicates(k, v, tol=0.9):
    """Greedy first-fit grouping of key rows in row order.

    A key joins the lowest-index group whose representative has cosine
    similarity >= ``tol``; otherwise it opens a new group. The representative
    is the most recently added member's key. ``tol == 1`` groups only exact
    duplicates (per-coordinate difference <= 1e-7). Zero-norm keys with
    ``tol < 1`` always open their own group and are counted in
    ``zero_norm_keys``.
    """
    k = as_matrix(k, "keys")
    v = as_matrix(v, "values")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if not 0.0 <= tol <= 1.0:
        raise ValueError(f"tol must lie in [0, 1], got {tol}")
    n, d = k.shape
    k64 = k.astype(np.float64)
    v64 = v.astype(np.float64)
    reps = np.empty((n, d))
    rep_norms = np.empty(n)
    means = np.empty((n, v.shape[1]))
    mult = np.zeros(n, dtype=np.int64)
    assignment = np.empty(n, dtype=np.int64)
    zero_norm = 0
    g = 0
    for i in range(n):
        key = k64[i]
        norm = float(np.sqrt(key @ key))
        target = -1
        if g:
            if tol >= 1.0:
                hits = np.flatnonzero(np.all(np.abs(reps[:g] - key) <= 1e-7, axis=1))
                if hits.size:
                    target = int(hits[0])
            elif norm == 0.0:
                zero_norm += 1
            else:
                cos = _cosine_to_reps(key, norm, reps[:g], rep_norms[:g])
                hits = np.flatnonzero(cos >= tol)
                if hits.size:
                    target = int(hits[0])
        elif norm == 0.0 and tol < 1.0:
            zero_norm += 1
        if target < 0:
            target = g
            g += 1
            means[target] = v64[i]
            mult[target] = 1
        else:
            m = mult[target]
            means[target] = (m * means[target] + v64[i]) / (m + 1)
            mult[target] = m + 1
        reps[target] = key
        rep_norms[target] = norm
        assignment[i] = target
    return GroupedKV(
        rep_keys=reps[:g].astype(np.float32),
        mean_values=means[:g].copy(),
        multiplicities=mult[:g].copy(),
        assignment=assignment,
        zero_norm_keys=zero_norm,
    )
