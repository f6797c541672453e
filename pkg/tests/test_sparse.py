import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import planted_prompt
from streamattn.ann import AnnConfig
from streamattn.attention import dense_attention
from streamattn.exceptions import InvariantError
from streamattn.metrics import attention_recall
from streamattn.sparse import (
    BucketCache,
    PromptMask,
    SparsePlan,
    cross_attention_pruned,
    execute_sparse,
    plan_self_attention,
    prune_prompt,
)

LSH = AnnConfig("lsh")
QUANT = AnnConfig("quant")


@pytest.mark.parametrize("backend", [LSH, QUANT])
def test_single_key_plan(rng, backend):
    plan = plan_self_attention(rng.standard_normal((5, 8)), rng.standard_normal((1, 8)), backend)
    assert all(c.tolist() == [0] for c in plan.candidates)
    assert plan.density == 1.0


@pytest.mark.parametrize("backend", [LSH, QUANT])
def test_self_match_in_candidates(rng, backend):
    keys = rng.standard_normal((64, 16))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    plan = plan_self_attention(keys, keys, backend)
    assert all(i in c for i, c in enumerate(plan.candidates))


def test_two_cluster_workload(rng):
    basis = np.linalg.qr(rng.standard_normal((32, 32)))[0]
    keys = np.concatenate([basis[0] + 0.05 * rng.standard_normal((40, 32)) / np.sqrt(32),
                           basis[1] + 0.05 * rng.standard_normal((40, 32)) / np.sqrt(32)])
    cluster = np.repeat([0, 1], 40)
    qi = rng.integers(80, size=20)
    queries = 8 * np.sqrt(32) * keys[qi]
    plan = plan_self_attention(queries, keys, LSH)
    cross = sum(np.sum(cluster[c] != cluster[i]) for i, c in zip(qi, plan.candidates))
    assert cross <= 0.01 * plan.candidates_total
    assert plan.density == pytest.approx(0.5, abs=0.05)
    ref = dense_attention(queries, keys, keys, want_weights=True)
    assert attention_recall(ref.weights, plan) >= 0.95


def test_quant_plan_density(rng):
    plan = plan_self_attention(rng.standard_normal((6, 8)), rng.standard_normal((40, 8)),
                               QUANT, target_density=0.25)
    assert all(c.size == 10 for c in plan.candidates)
    assert plan.density == 0.25


def test_full_plan_is_dense(rng):
    q, k, v = (rng.standard_normal(s).astype(np.float32) for s in ((7, 16), (30, 16), (30, 4)))
    ref = dense_attention(q, k, v, want_weights=True)
    out, stats = execute_sparse(q, k, v, SparsePlan.full(7, 30), reference=ref)
    np.testing.assert_array_equal(out.output, ref.output)
    assert stats.density == 1.0 and stats.recall == pytest.approx(1.0, abs=1e-9)
    assert stats.max_abs_err <= 1e-6


def test_top30_plan_recall_matches_oracle(rng):
    q, k, v = (rng.standard_normal(s) for s in ((6, 8), (50, 8), (50, 3)))
    ref = dense_attention(2 * q, k, v, want_weights=True)
    cands, mass = [], 0.0
    for row in ref.weights:
        top = sorted(range(50), key=lambda j: -row[j])[:15]
        mass += sum(row[j] for j in top)
        cands.append(np.array(sorted(top)))
    _, stats = execute_sparse(2 * q, k, v, SparsePlan(cands, 50), reference=ref)
    assert stats.recall == pytest.approx(mass / 6, abs=1e-12)


def test_single_candidate_rows(rng):
    q, k, v = (rng.standard_normal(s).astype(np.float32) for s in ((3, 4), (5, 4), (5, 2)))
    plan = SparsePlan([np.array([4]), np.array([0]), np.array([2])], 5)
    out, _ = execute_sparse(q, k, v, plan)
    np.testing.assert_array_equal(out.output, v[[4, 0, 2]])


def test_empty_candidates_rejected(rng):
    plan = SparsePlan([np.array([], dtype=np.int64)], 3)
    with pytest.raises(InvariantError):
        execute_sparse(np.ones((1, 2)), np.ones((3, 2)), np.ones((3, 2)), plan)


def test_fallback_accounting():
    keys = np.eye(16, dtype=np.float32)[:8]
    # a query orthogonal to everything rarely shares any of 1 table x 30 bits
    q = np.eye(16, dtype=np.float32)[8:12]
    plan = plan_self_attention(q, keys, AnnConfig("lsh", tables=1, hash_bits=30, seed=2))
    assert plan.fallback_count == 4
    assert all(c.tolist() == list(range(8)) for c in plan.candidates)
    executed = sum(c.size for c in plan.candidates)
    assert plan.density == executed / (4 * 8) == 1.0


def test_bucket_cache_reuse(rng):
    q = rng.standard_normal((4, 8)).astype(np.float32)
    keys = rng.standard_normal((20, 8)).astype(np.float32)
    buckets = BucketCache()
    a = prune_prompt(keys, q, LSH, buckets=buckets)
    plan = plan_self_attention(q, keys, LSH, buckets=buckets)
    assert buckets.hits == 1
    assert a.kept_count >= 1 and plan.n_keys == 20
    assert [c.tolist() for c in plan.candidates] == [
        c.tolist() for c in plan_self_attention(q, keys, LSH).candidates]


def test_single_prompt_token_kept(rng):
    for backend in (LSH, QUANT):
        mask = prune_prompt(rng.standard_normal((1, 8)), rng.standard_normal((3, 8)), backend)
        assert mask.kept.tolist() == [True]


def test_empty_prompt_rejected():
    with pytest.raises(ValueError):
        prune_prompt(np.zeros((0, 4)), np.ones((2, 4)))


@pytest.mark.parametrize("backend", [LSH, QUANT])
def test_orthogonal_prompt_token_pruned(rng, backend):
    queries = 5 * np.eye(8)[:2]
    prompt = np.array([queries[0], queries[1], np.eye(8)[5]]) / 5
    mask = prune_prompt(prompt, queries, backend, min_keep=1, topk=1)
    # brute-force: token 2 has zero dot product with every query
    assert np.all(queries @ prompt[2] == 0)
    assert mask.kept.tolist() == [True, True, False]


def test_prompt_copies_of_queries_kept_lsh(rng):
    queries = rng.standard_normal((6, 16)).astype(np.float32)
    mask = prune_prompt(queries[[3, 1, 4, 1, 5]], queries, LSH, min_keep=1)
    assert mask.kept.all()


def test_prompt_copies_of_queries_kept_quant(rng):
    # distinct unit tokens: each query's copy is its own top-1; a repeated copy
    # would lose the tie to its lower-index twin under top-k
    queries = rng.standard_normal((6, 16))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    mask = prune_prompt(queries[[3, 1, 4, 0, 5]], queries, QUANT, min_keep=1, topk=1)
    assert mask.kept.all()


def test_min_keep_refill_by_score():
    queries = np.array([[1.0, 0.0, 0.0]])
    prompt = np.array([[0.0, 1.0, 0.0], [0.5, 0.0, 0.0], [0.9, 0.0, 0.1], [0.0, 0.0, -1.0]])
    mask = prune_prompt(prompt, queries, QUANT, min_keep=3, topk=1)
    assert mask.kept.tolist() == [True, True, True, False]
    with pytest.raises(InvariantError):
        PromptMask(np.array([True, False, False]), min_keep=2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 8))
def test_identical_token_never_pruned(seed, p, n_q):
    rng = np.random.default_rng(seed)
    queries = rng.standard_normal((n_q, 8)).astype(np.float32)
    prompt = rng.standard_normal((p, 8)).astype(np.float32)
    j = int(rng.integers(p))
    prompt[j] = queries[int(rng.integers(n_q))]
    assert prune_prompt(prompt, queries, LSH, min_keep=1).kept[j]


def test_cross_attention_full_mask(rng):
    q, k, v = (rng.standard_normal(s).astype(np.float32) for s in ((4, 8), (10, 8), (10, 3)))
    out = cross_attention_pruned(q, k, v, PromptMask(np.ones(10, dtype=bool)))
    np.testing.assert_array_equal(out.output, dense_attention(q, k, v).output)


def test_cross_attention_single_token(rng):
    q, k, v = (rng.standard_normal(s).astype(np.float32) for s in ((4, 8), (10, 8), (10, 3)))
    kept = np.zeros(10, dtype=bool)
    kept[6] = True
    out = cross_attention_pruned(q, k, v, PromptMask(kept))
    np.testing.assert_array_equal(out.output, np.tile(v[6], (4, 1)))


@pytest.mark.parametrize("backend", [LSH, QUANT])
def test_planted_prompt_pruning(rng, backend):
    q, pk, pv, relevant = planted_prompt(rng)
    assert np.abs(q @ pk[~relevant].T).max() <= 1e-4
    mask = prune_prompt(pk, q, backend, min_keep=3, topk=1)
    assert mask.kept[relevant].all()
    ref = dense_attention(q, pk, pv).output
    err = np.abs(cross_attention_pruned(q, pk, pv, mask).output - ref).max()
    assert err <= 1e-3
    if backend is QUANT:
        assert mask.density == 3 / 64
    else:
        assert mask.density <= 0.15


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40))
def test_recall_monotone_under_truncation(seed, n_k):
    rng = np.random.default_rng(seed)
    w = dense_attention(3 * rng.standard_normal((4, 6)), rng.standard_normal((n_k, 6)),
                        np.zeros((n_k, 1)), want_weights=True).weights
    order = np.argsort(-rng.standard_normal((4, n_k)), axis=1)  # any fixed score ordering
    rec = [attention_recall(w, [o[:m] for o in order]) for m in range(1, n_k + 1)]
    assert all(b >= a - 1e-12 for a, b in zip(rec, rec[1:]))
    assert rec[-1] == pytest.approx(1.0, abs=1e-12)
