"""Self-contained oracle/property checks behind ``streamattn verify``.

Every check returns ``(passed, detail)``; details contain no timings so the
report text is reproducible for a fixed seed.
"""
import numpy as np

from .ann import build_quant, quant_topk
from .attention import GroupedKV, dense_attention, group_duplicates, grouped_attention
from .metrics import recall_density_curve
from .rollout import RolloutConfig, duplicate_config, run_rollout, strip_timing
from .sparse import SparsePlan, execute_sparse
from .tempcache import TempCache


def planted_duplicates(rng, n_unique, n_total, d, d_v):
    """Random (K, V) where keys are drawn with repetition from ``n_unique`` rows."""
    uniq = rng.standard_normal((n_unique, d)).astype(np.float32)
    idx = np.concatenate([np.arange(n_unique), rng.integers(0, n_unique, n_total - n_unique)])
    rng.shuffle(idx)
    k = uniq[idx]
    v = rng.standard_normal((n_total, d_v)).astype(np.float32)
    return k, v


def grouped_exactness(seed=0, instances=500, log_bias=True, max_keys=256, max_dim=64):
    """Max |grouped - dense| over random planted-duplicate instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n_total = int(rng.integers(2, max_keys + 1))
        n_unique = int(rng.integers(1, n_total + 1))
        d = int(rng.integers(1, max_dim + 1))
        d_v = int(rng.integers(1, max_dim + 1))
        k, v = planted_duplicates(rng, n_unique, n_total, d, d_v)
        q = rng.standard_normal((int(rng.integers(1, 9)), d)).astype(np.float32)
        g = group_duplicates(k, v, tol=1.0)
        diff = np.abs(grouped_attention(q, g, log_bias=log_bias).output
                      - dense_attention(q, k, v).output).max()
        worst = max(worst, float(diff))
    return worst


def orthogonal_stream(rng, frames, per_frame, d):
    """Frames of mutually orthogonal keys (rows of one random orthogonal basis)."""
    basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
    keys = basis[: frames * per_frame].astype(np.float32)
    return [keys[f * per_frame:(f + 1) * per_frame] for f in range(frames)]


def _check_grouped(seed, log_bias):
    worst = grouped_exactness(seed, instances=100, log_bias=log_bias)
    return worst <= 1e-6, f"max_abs_diff={worst:.3g} over 100 instances"


def _check_unit_multiplicity(seed, log_bias):
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((40, 16)).astype(np.float32)
    v = rng.standard_normal((40, 8)).astype(np.float32)
    q = rng.standard_normal((5, 16)).astype(np.float32)
    g = GroupedKV(k, v.astype(np.float64), np.ones(40, dtype=np.int64))
    diff = np.abs(grouped_attention(q, g, log_bias=log_bias).output
                  - dense_attention(q, k, v).output).max()
    return diff == 0.0, f"max_abs_diff={diff:.3g}"


def _check_no_redundancy(seed, log_bias):
    rng = np.random.default_rng(seed)
    frames = orthogonal_stream(rng, 4, 8, 32)
    cache = TempCache(32, 8, merge_tol=0.9)
    vals = []
    merges = 0
    for fk in frames:
        fv = rng.standard_normal((fk.shape[0], 8)).astype(np.float32)
        vals.append(fv)
        merges += cache.ingest_frame(fk, fv).merges
    q = rng.standard_normal((6, 32)).astype(np.float32)
    diff = np.abs(cache.attend(q, log_bias=log_bias).output
                  - dense_attention(q, np.concatenate(frames), np.concatenate(vals)).output).max()
    return merges == 0 and diff <= 1e-6, f"merges={merges} max_abs_diff={diff:.3g}"


def _check_duplicate_rollout(seed, log_bias):
    cfg = duplicate_config(seed=seed, frames=8)
    rep = run_rollout(cfg, methods=("tempcache",))
    err = rep.column("tempcache", "max_abs_err").max()
    return err <= 1e-6, f"max_abs_err={err:.3g}"


def _check_bounded(seed, log_bias):
    cfg = RolloutConfig(frames=60, tokens_per_frame=16, tracks=16, queries_per_frame=8,
                        prompt_len=16, seed=seed)
    rep = run_rollout(cfg, methods=("tempcache",))
    entries = rep.column("tempcache", "cache_entries")
    return bool(np.all(entries == 16)), f"entries_min={entries.min()} entries_max={entries.max()}"


def _check_curve(seed, log_bias):
    rng = np.random.default_rng(seed)
    q = 4.0 * rng.standard_normal((16, 32))
    k = rng.standard_normal((200, 32))
    w = dense_attention(q, k, np.zeros((200, 1)), want_weights=True).weights
    curve = recall_density_curve(w, [0.05, 0.1, 0.3, 0.5, 1.0])
    rec = [r for _, r in curve]
    ok = all(b >= a for a, b in zip(rec, rec[1:])) and curve[-1] == (1.0, 1.0)
    return ok, "recall=" + ",".join(f"{r:.3f}" for r in rec)


def _check_bits(seed, log_bias):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((500, 32)).astype(np.float32)
    queries = rng.standard_normal((50, 32)).astype(np.float32)
    exact = quant_topk(build_quant(keys, 32), queries, 10)
    rec = []
    for bits in (2, 4, 8, 16, 32):
        got = quant_topk(build_quant(keys, bits), queries, 10)
        rec.append(np.mean([np.intersect1d(a, b).size / 10 for a, b in zip(got, exact)]))
    ok = all(b >= a - 0.02 for a, b in zip(rec, rec[1:])) and rec[-1] == 1.0
    return ok, "recall=" + ",".join(f"{r:.3f}" for r in rec)


def _check_density_one(seed, log_bias):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((7, 16)).astype(np.float32)
    k = rng.standard_normal((30, 16)).astype(np.float32)
    v = rng.standard_normal((30, 4)).astype(np.float32)
    out, _ = execute_sparse(q, k, v, SparsePlan.full(7, 30))
    diff = np.abs(out.output - dense_attention(q, k, v).output).max()
    return diff <= 1e-6, f"max_abs_diff={diff:.3g}"


def _check_determinism(seed, log_bias):
    cfg = RolloutConfig(frames=5, tokens_per_frame=16, tracks=16, queries_per_frame=8,
                        prompt_len=16, seed=seed)
    a = strip_timing(run_rollout(cfg).rows)
    b = strip_timing(run_rollout(cfg).rows)
    return a == b, f"rows={len(a)}"


CHECKS = (
    ("grouped_exactness", _check_grouped),
    ("unit_multiplicity_is_dense", _check_unit_multiplicity),
    ("no_redundancy_degeneracy", _check_no_redundancy),
    ("duplicate_stream_exact", _check_duplicate_rollout),
    ("bounded_cache", _check_bounded),
    ("recall_curve_monotone", _check_curve),
    ("quant_bits_monotone", _check_bits),
    ("density_one_is_dense", _check_density_one),
    ("rollout_determinism", _check_determinism),
)


def run_checks(seed=0, log_bias=True):
    """Run every check; returns a list of ``(name, passed, detail)``."""
    results = []
    for name, fn in CHECKS:
        passed, detail = fn(seed, log_bias)
        results.append((name, bool(passed), detail))
    return results
