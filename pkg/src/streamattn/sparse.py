"""ANN-driven sparse self-attention and prompt pruning for cross-attention.

Self-attention: each query attends only to the keys that share an LSH
bucket with it (any table), or to its quantised top-k keys. A query left
with no candidates falls back to the full key set.

Cross-attention: a prompt token survives for the current frame only if it
shares a bucket with at least one frame query (LSH), or shows up in some
query's quantised top-k list. A floor of ``min_keep`` tokens is enforced.
"""
import math
import time
from dataclasses import dataclass
from typing import List

import numpy as np

from .ann import (
    AnnConfig,
    build_lsh,
    build_quant,
    lsh_candidates,
    lsh_signatures,
    make_hyperplanes,
    quant_scores,
    quant_topk,
)
from .attention import AttentionOutput, attend_rows, dense_attention
from .exceptions import InvariantError, ShapeError
from .metrics import AttentionStats, attention_recall
from .tensor import as_matrix


@dataclass
class SparsePlan:
    candidates: List[np.ndarray]
    n_keys: int
    fallback_count: int = 0

    @property
    def candidates_total(self):
        return int(sum(c.size for c in self.candidates))

    @property
    def density(self):
        n_q = len(self.candidates)
        if n_q == 0 or self.n_keys == 0:
            return 1.0
        return self.candidates_total / (n_q * self.n_keys)

    @classmethod
    def full(cls, n_queries, n_keys):
        all_idx = np.arange(n_keys, dtype=np.int64)
        return cls([all_idx] * n_queries, n_keys)


@dataclass
class PromptMask:
    kept: np.ndarray  # bool per prompt token
    min_keep: int = 1

    def __post_init__(self):
        if self.kept_count < min(self.min_keep, self.kept.size):
            raise InvariantError("mask keeps fewer tokens than min_keep")

    @property
    def kept_count(self):
        return int(self.kept.sum())

    @property
    def density(self):
        return self.kept_count / self.kept.size


class BucketCache:
    """Per-step memo of query LSH signatures, keyed on the backend parameters.

    Cross-attention pruning and sparse self-attention in the same step hash
    the same frame queries; with one cache both reuse a single signature
    computation. Call :meth:`new_step` between steps.
    """

    def __init__(self):
        self._store = {}
        self.hits = 0

    def new_step(self):
        self._store.clear()

    def signatures(self, cfg, queries):
        key = (cfg, queries.shape[1])
        hit = self._store.get(key)
        if hit is not None and hit[0] is queries:
            self.hits += 1
            return hit[1]
        planes = make_hyperplanes(queries.shape[1], cfg.tables, cfg.hash_bits, cfg.seed)
        sigs = lsh_signatures(planes, queries)
        self._store[key] = (queries, sigs)
        return sigs


def plan_self_attention(queries, keys, backend=None, target_density=0.25, buckets=None):
    """Candidate keys per query; empty candidate sets fall back to all keys."""
    backend = backend or AnnConfig()
    queries = as_matrix(queries, "queries")
    keys = as_matrix(keys, "keys", cols=queries.shape[1])
    n_k = keys.shape[0]
    if backend.kind == "lsh":
        index = build_lsh(keys, backend.tables, backend.hash_bits, backend.seed)
        sigs = buckets.signatures(backend, queries) if buckets is not None else None
        cands = lsh_candidates(index, queries, sigs)
    else:
        if not 0.0 < target_density <= 1.0:
            raise ValueError("target_density must lie in (0, 1]")
        k = max(1, math.ceil(target_density * n_k - 1e-12))
        cands = quant_topk(build_quant(keys, backend.bits), queries, k) if n_k else [
            np.empty(0, dtype=np.int64) for _ in range(queries.shape[0])]
    fallback = 0
    all_idx = np.arange(n_k, dtype=np.int64)
    for i, c in enumerate(cands):
        if c.size == 0:
            cands[i] = all_idx
            fallback += 1
    return SparsePlan(list(cands), n_k, fallback)


def execute_sparse(queries, keys, values, plan, reference=None, log_bias=None):
    """Softmax attention restricted to each query's candidate rows.

    Queries sharing an identical candidate list are evaluated together, so a
    plan whose lists are all full runs exactly the dense computation.
    ``log_bias`` is an optional per-key logit offset (``ln m`` for grouped
    caches). ``reference`` is the dense :class:`AttentionOutput` (with
    weights) used to fill recall and error in the returned stats.
    """
    t0 = time.perf_counter()
    queries = as_matrix(queries, "queries")
    keys = as_matrix(keys, "keys", cols=queries.shape[1])
    values = as_matrix(values, "values")
    if keys.shape[0] != values.shape[0]:
        raise ShapeError(f"{keys.shape[0]} keys but {values.shape[0]} values")
    if len(plan.candidates) != queries.shape[0]:
        raise ShapeError("plan does not match the number of queries")
    groups = {}
    for i, c in enumerate(plan.candidates):
        if c.size == 0:
            raise InvariantError(f"query {i} reached execution with no candidates")
        groups.setdefault(c.tobytes(), (c, []))[1].append(i)
    out = np.empty((queries.shape[0], values.shape[1]))
    for c, rows in groups.values():
        full = c.size == keys.shape[0]
        k_sel = keys if full else keys[c]
        v_sel = values if full else values[c]
        bias = None
        if log_bias is not None:
            bias = (log_bias if full else log_bias[c])[None, :]
        q_sel = queries if len(rows) == queries.shape[0] else queries[rows]
        out[rows] = attend_rows(q_sel, k_sel, v_sel, bias)[0]
    result = AttentionOutput(out.astype(np.float32))
    stats = AttentionStats(density=plan.density, candidates_total=plan.candidates_total)
    stats.wall_time = time.perf_counter() - t0
    if reference is not None:
        stats.max_abs_err = float(np.max(np.abs(result.output - reference.output)))
        if reference.weights is not None:
            stats.recall = attention_recall(reference.weights, plan)
    return result, stats


def prune_prompt(prompt_keys, frame_queries, backend=None, min_keep=4, topk=2,
                 buckets=None):
    """Mask of prompt tokens relevant to the current frame's queries."""
    backend = backend or AnnConfig()
    prompt_keys = as_matrix(prompt_keys, "prompt_keys")
    frame_queries = as_matrix(frame_queries, "queries", cols=prompt_keys.shape[1])
    p = prompt_keys.shape[0]
    if p == 0:
        raise ValueError("cross-attention needs a non-empty prompt")
    min_keep = max(1, min(min_keep, p))
    if backend.kind == "lsh":
        index = build_lsh(prompt_keys, backend.tables, backend.hash_bits, backend.seed)
        q_sigs = (buckets.signatures(backend, frame_queries) if buckets is not None
                  else lsh_signatures(index.hyperplanes, frame_queries))
        # any-table rule: one shared bucket with one query is enough
        kept = np.zeros(p, dtype=bool)
        for t in range(backend.tables):
            kept |= np.isin(index.signatures[:, t], q_sigs[:, t])
        scores = (frame_queries.astype(np.float64) @ prompt_keys.astype(np.float64).T)
    else:
        index = build_quant(prompt_keys, backend.bits)
        scores = quant_scores(index, frame_queries)
        kept = np.zeros(p, dtype=bool)
        for row in quant_topk(index, frame_queries, topk):
            kept[row] = True
    if kept.sum() < min_keep:
        best = scores.max(axis=0) if scores.size else np.zeros(p)
        # stable descending order: ties resolve to the lower token index
        for j in np.argsort(-best, kind="stable"):
            if kept.sum() >= min_keep:
                break
            kept[j] = True
    return PromptMask(kept, min_keep)


def cross_attention_pruned(frame_queries, prompt_keys, prompt_values, mask,
                           want_weights=False):
    prompt_keys = as_matrix(prompt_keys, "prompt_keys")
    if mask.kept.shape[0] != prompt_keys.shape[0]:
        raise ShapeError("mask length differs from prompt length")
    if mask.kept_count == 0:
        raise InvariantError("mask keeps no prompt tokens")
    if mask.kept.all():
        return dense_attention(frame_queries, prompt_keys, prompt_values, want_weights)
    idx = np.flatnonzero(mask.kept)
    return dense_attention(frame_queries, prompt_keys[idx],
                           np.asarray(prompt_values)[idx], want_weights)
