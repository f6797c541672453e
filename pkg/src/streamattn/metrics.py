"""Attention recall, density and cache accounting.

Recall is the share of dense attention probability mass that a sparse or
compressed attention pattern preserves, averaged uniformly over queries.
"""
import csv
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .exceptions import ShapeError

# bytes per cache entry beyond its key/value floats: uint32 multiplicity and
# uint32 last_frame
ENTRY_OVERHEAD_BYTES = 8
FLOAT_BYTES = 4

METRIC_COLUMNS = (
    "frame", "method", "density", "recall", "max_abs_err",
    "cache_entries", "cache_bytes", "attn_micros", "index_micros",
)
TIMING_COLUMNS = ("attn_micros", "index_micros")


@dataclass
class AttentionStats:
    density: float
    recall: float = math.nan  # nan when no dense reference was supplied
    max_abs_err: float = math.nan
    candidates_total: int = 0
    wall_time: float = 0.0  # seconds


def _candidate_lists(plan):
    return plan.candidates if hasattr(plan, "candidates") else plan


def attention_recall(dense_weights, plan):
    """Mean over queries of the dense mass on each query's retained keys.

    ``plan`` is a :class:`~streamattn.sparse.SparsePlan` or a sequence of
    per-query index arrays.
    """
    w = np.asarray(dense_weights, dtype=np.float64)
    cands = _candidate_lists(plan)
    if len(cands) != w.shape[0]:
        raise ShapeError(f"plan has {len(cands)} queries, weights have {w.shape[0]}")
    total = 0.0
    for row, idx in zip(w, cands):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= w.shape[1]):
            raise IndexError("plan index out of range")
        total += row[idx].sum()
    return total / w.shape[0]


def overlap_recall(dense_weights, assignment, compressed_weights, multiplicities=None):
    """Recall of attention computed over grouped (compressed) keys.

    ``assignment`` maps every original key to its group. A group's
    compressed weight is spread evenly over its ``m`` members, and recall is
    the per-token overlap ``sum_i min(dense_i, compressed_g(i) / m_g(i))``.
    Exact grouping of identical keys gives 1.0; with all ``m = 1`` and a
    renormalised sparse pattern it equals the retained dense mass, i.e.
    :func:`attention_recall`.
    """
    w = np.asarray(dense_weights, dtype=np.float64)
    c = np.asarray(compressed_weights, dtype=np.float64)
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape[0] != w.shape[1]:
        raise ShapeError("assignment must cover every dense key")
    if multiplicities is None:
        multiplicities = np.bincount(assignment, minlength=c.shape[1])
    per_token = c / np.maximum(np.asarray(multiplicities, dtype=np.float64), 1.0)
    spread = per_token[:, assignment]
    return float(np.minimum(w, spread).sum(axis=1).mean())


def recall_density_curve(dense_weights, fractions):
    """``(density, recall)`` when each query keeps its top ``ceil(f * N_k)`` keys."""
    w = np.asarray(dense_weights, dtype=np.float64)
    n_q, n_k = w.shape
    # descending by weight, lower index first on ties
    order = np.argsort(-w, axis=1, kind="stable")
    sorted_w = np.take_along_axis(w, order, axis=1)
    cum = np.cumsum(sorted_w, axis=1)
    out = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {f}")
        keep = min(n_k, math.ceil(f * n_k - 1e-12))
        if keep == n_k:
            recall = 1.0
        else:
            recall = min(1.0, float(cum[:, keep - 1].mean()))
        out.append((keep / n_k, recall))
    return out


def entry_bytes(d, d_v):
    return (d + d_v) * FLOAT_BYTES + ENTRY_OVERHEAD_BYTES


def cache_footprint(cache):
    """``(bytes, entries)`` of a :class:`~streamattn.tempcache.TempCache`."""
    n = len(cache)
    return n * entry_bytes(cache.d, cache.d_v), n


def raw_cache_bytes(tokens, d, d_v):
    """Footprint of an uncompressed cache: keys and values only."""
    return tokens * (d + d_v) * FLOAT_BYTES


@contextmanager
def timed(sink, key):
    """Add the elapsed monotonic time of the block, in seconds, to ``sink[key]``."""
    t0 = time.perf_counter()
    try:
        yield
    finally:
        sink[key] = sink.get(key, 0.0) + time.perf_counter() - t0


def format_row(row):
    out = {}
    for col in METRIC_COLUMNS:
        val = row[col]
        out[col] = f"{val:.9g}" if isinstance(val, float) else str(val)
    return out


def write_metrics_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(format_row(row))


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
