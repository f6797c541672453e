"""Synthetic autoregressive rollouts.

The generator emits one frame at a time from a set of persistent "tracks"
(semantic tokens). A track keeps a unit base direction; every frame it emits
a key that is a bounded perturbation of that direction, so keys of one track
stay close across frames while different tracks stay apart. Queries are
noisy, scaled copies of a few "focus" tokens of the frame. Each frame also
gets a prompt in which a few tokens align with focus tracks and the rest are
orthogonal to every query.

:func:`run_rollout` drives the dense oracle and the compressed/sparse
pipelines side by side on the same stream and records one metrics row per
frame and method.
"""
import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, Iterator, List

import numpy as np

from .ann import QUANT_BITS, AnnConfig
from .attention import dense_attention
from .exceptions import ConfigError, NonFiniteError
from .metrics import (
    TIMING_COLUMNS,
    attention_recall,
    cache_footprint,
    overlap_recall,
    raw_cache_bytes,
    timed,
    write_metrics_csv,
)
from .sparse import (
    BucketCache,
    SparsePlan,
    cross_attention_pruned,
    execute_sparse,
    plan_self_attention,
    prune_prompt,
)
from .tempcache import POLICIES, TempCache

METHODS = ("dense", "tempcache", "annsa", "annca", "all")
MAX_REJECTIONS = 2000


@dataclass(frozen=True)
class RolloutConfig:
    frames: int = 1000
    tokens_per_frame: int = 64
    d: int = 32
    d_v: int = 32
    tracks: int = 64
    track_drift: float = 0.15
    birth_rate: float = 0.0
    prompt_len: int = 64
    relevant_prompt_per_frame: int = 3
    seed: int = 0
    merge_tol: float = 0.9
    backend: str = "quant"
    bits: int = 8
    dense_warmup_steps: int = 1
    # generator knobs
    queries_per_frame: int = 16
    query_focus: int = 3
    query_noise: float = 0.1
    query_scale: float = 8.0
    drift_walk: float = 0.0
    value_rho: float = 0.9
    prompt_scale: float = 1.5
    intra_cos_floor: float = 0.97
    # pipeline knobs
    lsh_tables: int = 8
    lsh_bits: int = 10
    target_density: float = 0.25
    min_keep: int = 4
    ca_topk: int = 2
    steps_per_frame: int = 1
    policy: str = "last"

    def validate(self):
        positive = ("frames", "tokens_per_frame", "d", "d_v", "tracks", "prompt_len",
                    "queries_per_frame", "lsh_tables", "lsh_bits", "min_keep",
                    "ca_topk", "steps_per_frame")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", name)
        if self.tracks > self.tokens_per_frame:
            raise ConfigError("tracks must not exceed tokens_per_frame", "tracks")
        if self.queries_per_frame >= self.d:
            raise ConfigError("queries_per_frame must be < d so irrelevant prompt "
                              "tokens can be orthogonal to every query",
                              "queries_per_frame")
        if not 1 <= self.query_focus <= min(self.tracks, self.queries_per_frame):
            raise ConfigError("query_focus must lie in [1, min(tracks, queries_per_frame)]",
                              "query_focus")
        if not 0 <= self.relevant_prompt_per_frame <= min(self.prompt_len,
                                                           self.query_focus):
            raise ConfigError("relevant_prompt_per_frame out of range",
                              "relevant_prompt_per_frame")
        if self.backend not in ("lsh", "quant"):
            raise ConfigError(f"backend must be lsh or quant, got {self.backend!r}",
                              "backend")
        if self.bits not in QUANT_BITS:
            raise ConfigError(f"bits must be one of {QUANT_BITS}", "bits")
        if not 0.0 <= self.merge_tol <= 1.0:
            raise ConfigError("merge_tol must lie in [0, 1]", "merge_tol")
        if not -1.0 < self.intra_cos_floor <= 1.0:
            raise ConfigError("intra_cos_floor must lie in (-1, 1]", "intra_cos_floor")
        if not 0.0 < self.target_density <= 1.0:
            raise ConfigError("target_density must lie in (0, 1]", "target_density")
        if not 0.0 <= self.value_rho <= 1.0:
            raise ConfigError("value_rho must lie in [0, 1]", "value_rho")
        for name in ("track_drift", "birth_rate", "query_noise", "drift_walk",
                     "dense_warmup_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", name)
        if not 1 <= self.lsh_bits <= 30:
            raise ConfigError("lsh_bits must lie in [1, 30]", "lsh_bits")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}", "policy")
        return self

    def ann(self):
        return AnnConfig(self.backend, self.bits, self.lsh_tables, self.lsh_bits, self.seed)


def drifting_config(**overrides):
    """Workload whose tracks wander, so older members of a cache entry go stale.

    Queries are sharp (large ``query_scale``): attention is dominated by the
    most recent appearance of a track, the recency regime in which the
    representative policies separate.
    """
    base = dict(frames=60, tokens_per_frame=16, tracks=16, queries_per_frame=8,
                track_drift=0.05, drift_walk=0.3, birth_rate=0.5, query_scale=16.0,
                merge_tol=0.9, prompt_len=16)
    base.update(overrides)
    return RolloutConfig(**base).validate()


def duplicate_config(**overrides):
    """Every frame repeats the same keys exactly (values still evolve)."""
    base = dict(frames=20, tokens_per_frame=16, tracks=16, queries_per_frame=8,
                track_drift=0.0, drift_walk=0.0, merge_tol=1.0, prompt_len=16)
    base.update(overrides)
    return RolloutConfig(**base).validate()


# ------------------------------------------------------------- config files


def _coerce(name, typ, raw):
    try:
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}", name) from None


def parse_overrides(pairs, base=None):
    """Apply ``key=value`` strings to a config; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(RolloutConfig)}
    updates = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"expected key=value, got {pair!r}", pair)
        key, raw = (s.strip() for s in pair.split("=", 1))
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}", key)
        updates[key] = _coerce(key, types[key], raw)
    return replace(base or RolloutConfig(), **updates)


def load_config(path, overrides=()):
    lines = []
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if line:
                lines.append(line)
    cfg = parse_overrides(lines)
    return parse_overrides(overrides, cfg).validate()


def dump_config(cfg, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in asdict(cfg).items():
            fh.write(f"{key}={val}\n")


# ---------------------------------------------------------------- generator


@dataclass
class Frame:
    index: int
    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    prompt_keys: np.ndarray
    prompt_values: np.ndarray
    track_labels: np.ndarray  # per key token
    relevant_mask: np.ndarray  # per prompt token


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _sample_base(rng, d, others, max_cos=0.5):
    for _ in range(MAX_REJECTIONS):
        cand = _unit(rng.standard_normal(d))
        if not others or np.max(np.asarray(others) @ cand) <= max_cos:
            return cand
    raise ConfigError(
        f"could not place a track direction with cosine <= {max_cos} to "
        f"{len(others)} others in d={d}; raise d or lower tracks", "tracks")


def _perturb(rng, base, drift, min_cos):
    """``normalize(base + noise)`` with cos(result, base) >= min_cos."""
    d = base.shape[0]
    noise = drift * rng.standard_normal(d) / math.sqrt(d)
    for _ in range(64):
        key = _unit(base + noise)
        if key @ base >= min_cos:
            return key
        noise *= 0.5
    return base.copy()


def generate_stream(config) -> Iterator[Frame]:
    """Yield frames of a planted-track stream; deterministic per seed."""
    cfg = config.validate()
    rng = np.random.default_rng(cfg.seed)
    d, d_v = cfg.d, cfg.d_v
    # a per-key cosine bound of c to the base keeps any two keys of the track
    # within the configured pairwise floor: cos(2 * acos(c)) = 2c^2 - 1
    min_cos = math.sqrt((1.0 + cfg.intra_cos_floor) / 2.0)
    bases: List[np.ndarray] = []
    for _ in range(cfg.tracks):
        bases.append(_sample_base(rng, d, bases))
    labels = list(range(cfg.tracks))
    next_label = cfg.tracks
    values = [rng.standard_normal(d_v) for _ in range(cfg.tracks)]
    innov = math.sqrt(max(0.0, 1.0 - cfg.value_rho ** 2))
    owner = np.arange(cfg.tokens_per_frame) % cfg.tracks

    for f in range(cfg.frames):
        if f > 0:
            births = rng.poisson(cfg.birth_rate) if cfg.birth_rate > 0 else 0
            for _ in range(births):
                slot = int(rng.integers(cfg.tracks))
                others = [b for i, b in enumerate(bases) if i != slot]
                bases[slot] = _sample_base(rng, d, others)
                values[slot] = rng.standard_normal(d_v)
                labels[slot] = next_label
                next_label += 1
            if cfg.drift_walk > 0:
                for i in range(cfg.tracks):
                    step = cfg.drift_walk * rng.standard_normal(d) / math.sqrt(d)
                    bases[i] = _unit(bases[i] + step)
            for i in range(cfg.tracks):
                values[i] = cfg.value_rho * values[i] + innov * rng.standard_normal(d_v)

        keys = np.stack([
            bases[t].copy() if cfg.track_drift == 0
            else _perturb(rng, bases[t], cfg.track_drift, min_cos)
            for t in owner
        ])
        vals = np.stack([values[t] for t in owner])

        # queries concentrate on a few focus tokens of the frame
        focus = np.sort(rng.choice(cfg.tokens_per_frame, cfg.query_focus, replace=False))
        picked = focus[np.arange(cfg.queries_per_frame) % focus.size]
        noise = cfg.query_noise * rng.standard_normal((picked.size, d)) / math.sqrt(d)
        q_unit = _unit(keys[picked] + noise)
        queries = cfg.query_scale * math.sqrt(d) * q_unit

        p = cfg.prompt_len
        prompt = np.empty((p, d))
        slots = rng.permutation(p)
        rel_slots = slots[: cfg.relevant_prompt_per_frame]
        irr_slots = slots[cfg.relevant_prompt_per_frame:]
        for j, s in enumerate(rel_slots):
            prompt[s] = keys[focus[j]]
        # orthonormal basis of the query span; project it out
        basis, _ = np.linalg.qr(q_unit.T)
        raw = rng.standard_normal((irr_slots.size, d))
        raw -= (raw @ basis) @ basis.T
        prompt[irr_slots] = _unit(raw)
        prompt *= cfg.prompt_scale
        relevant = np.zeros(p, dtype=bool)
        relevant[rel_slots] = True
        if irr_slots.size:
            leak = np.abs(q_unit @ _unit(prompt[irr_slots]).T).max()
            assert leak <= 0.1, f"irrelevant prompt token leaks onto queries ({leak})"

        yield Frame(
            index=f,
            queries=queries.astype(np.float32),
            keys=keys.astype(np.float32),
            values=vals.astype(np.float32),
            prompt_keys=prompt.astype(np.float32),
            prompt_values=rng.standard_normal((p, d_v)).astype(np.float32),
            track_labels=np.array([labels[t] for t in owner], dtype=np.int64),
            relevant_mask=relevant,
        )


# ------------------------------------------------------------------ rollout


class _RawCache:
    def __init__(self, d, d_v):
        self.k = np.empty((1024, d), dtype=np.float32)
        self.v = np.empty((1024, d_v), dtype=np.float32)
        self.n = 0

    def extend(self, k, v):
        need = self.n + k.shape[0]
        if need > self.k.shape[0]:
            cap = max(need, 2 * self.k.shape[0])
            self.k = np.concatenate([self.k[: self.n], np.empty((cap - self.n, self.k.shape[1]), np.float32)])
            self.v = np.concatenate([self.v[: self.n], np.empty((cap - self.n, self.v.shape[1]), np.float32)])
        self.k[self.n:need] = k
        self.v[self.n:need] = v
        self.n = need


@dataclass
class RolloutReport:
    config: RolloutConfig
    methods: List[str]
    rows: List[Dict] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)

    def column(self, method, col):
        return np.array([r[col] for r in self.rows if r["method"] == method])

    def write_csv(self, path):
        write_metrics_csv(path, self.rows)

    def write_summary(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, val in self.summary.items():
                fh.write(f"{key}={val:.9g}\n" if isinstance(val, float) else f"{key}={val}\n")


def _normalize_methods(methods):
    out = ["dense"]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}", "methods")
        if m not in out:
            out.append(m)
    return [m for m in METHODS if m in out]


def _check_finite(arr, frame, method):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite attention output at frame {frame}, method {method}")


def run_rollout(config, methods=METHODS, time_include_index=False, frames=None):
    """Run the dense oracle plus the requested methods over one stream.

    ``frames`` optionally supplies a pre-generated frame sequence.
    """
    cfg = config.validate()
    methods = _normalize_methods(methods)
    ann = cfg.ann()
    caches = {m: TempCache(cfg.d, cfg.d_v, cfg.merge_tol, ann, cfg.policy)
              for m in ("tempcache", "all") if m in methods}
    assignments = {m: [] for m in caches}
    raw = _RawCache(cfg.d, cfg.d_v)
    buckets = BucketCache()
    report = RolloutReport(cfg, methods)
    spf = cfg.steps_per_frame

    for fr in (frames if frames is not None else generate_stream(cfg)):
        f = fr.index
        times = {m: {} for m in methods}
        raw.extend(fr.keys, fr.values)
        for m, cache in caches.items():
            with timed(times[m], "index"):
                st = cache.ingest_frame(fr.keys, fr.values, frame=f)
            assignments[m].append(st.assignment)
        n_q, n_raw, p = fr.queries.shape[0], raw.n, fr.prompt_keys.shape[0]
        dense_work = n_q * (n_raw + p)
        step_rows = {}
        for s in range(spf):
            warm = f * spf + s < cfg.dense_warmup_steps
            buckets.new_step()
            t_dense = {}
            with timed(t_dense, "self"):
                ref_self = dense_attention(fr.queries, raw.k[:n_raw], raw.v[:n_raw], True)
            with timed(t_dense, "cross"):
                ref_cross = dense_attention(fr.queries, fr.prompt_keys, fr.prompt_values, True)
            with np.errstate(over="ignore", invalid="ignore"):
                ref_out = ref_self.output + ref_cross.output
            _check_finite(ref_out, f, "dense")
            times["dense"]["attn"] = times["dense"].get("attn", 0.0) + t_dense["self"] + t_dense["cross"]
            step_rows["dense"] = dict(density=1.0, recall=1.0, err=0.0,
                                      entries=n_raw, bytes=raw_cache_bytes(n_raw, cfg.d, cfg.d_v))

            for m in methods[1:]:
                t = times[m]
                self_recall = cross_recall = 1.0
                self_work, cross_work = n_q * n_raw, n_q * p
                entries, nbytes = n_raw, raw_cache_bytes(n_raw, cfg.d, cfg.d_v)

                if m in ("tempcache", "all"):
                    cache = caches[m]
                    nbytes, entries = cache_footprint(cache)
                    assign = np.concatenate(assignments[m])
                    mult = cache.multiplicities
                    if m == "tempcache" or warm:
                        plan = SparsePlan.full(n_q, entries)
                    else:
                        with timed(t, "index"):
                            plan = plan_self_attention(fr.queries, cache.keys.astype(np.float32),
                                                       ann, cfg.target_density, buckets)
                    with timed(t, "attn"):
                        res, _ = execute_sparse(fr.queries, cache.keys.astype(np.float32),
                                                cache.value_means.astype(np.float32), plan,
                                                log_bias=np.log(mult.astype(np.float64)))
                    self_out = res.output
                    self_work = plan.candidates_total
                    comp_w = _plan_weights(fr.queries, cache.keys, mult, plan)
                    self_recall = overlap_recall(ref_self.weights, assign, comp_w, mult)
                elif m == "annsa":
                    if warm:
                        plan = SparsePlan.full(n_q, n_raw)
                    else:
                        with timed(t, "index"):
                            plan = plan_self_attention(fr.queries, raw.k[:n_raw], ann,
                                                       cfg.target_density, buckets)
                    with timed(t, "attn"):
                        res, _ = execute_sparse(fr.queries, raw.k[:n_raw], raw.v[:n_raw], plan)
                    self_out = res.output
                    self_work = plan.candidates_total
                    self_recall = attention_recall(ref_self.weights, plan)
                else:
                    # identical computation to the dense oracle: reuse it
                    t["attn"] = t.get("attn", 0.0) + t_dense["self"]
                    self_out = ref_self.output

                if m in ("annca", "all") and not warm:
                    with timed(t, "index"):
                        mask = prune_prompt(fr.prompt_keys, fr.queries, ann, cfg.min_keep,
                                            cfg.ca_topk, buckets)
                    with timed(t, "attn"):
                        cross = cross_attention_pruned(fr.queries, fr.prompt_keys,
                                                       fr.prompt_values, mask)
                    kept = np.flatnonzero(mask.kept)
                    cross_out = cross.output
                    cross_work = n_q * kept.size
                    cross_recall = attention_recall(ref_cross.weights, [kept] * n_q)
                else:
                    t["attn"] = t.get("attn", 0.0) + t_dense["cross"]
                    cross_out = ref_cross.output

                with np.errstate(over="ignore", invalid="ignore"):
                    out = self_out + cross_out
                _check_finite(out, f, m)
                step_rows[m] = dict(
                    density=(self_work + cross_work) / dense_work,
                    recall=min(self_recall, cross_recall),
                    err=float(np.max(np.abs(out - ref_out))),
                    entries=entries, bytes=nbytes,
                )

        for m in methods:
            r = step_rows[m]
            attn = times[m].get("attn", 0.0)
            index = times[m].get("index", 0.0)
            if time_include_index:
                attn += index
            report.rows.append({
                "frame": f, "method": m, "density": float(r["density"]),
                "recall": float(r["recall"]), "max_abs_err": float(r["err"]),
                "cache_entries": int(r["entries"]), "cache_bytes": int(r["bytes"]),
                "attn_micros": int(round(attn * 1e6)), "index_micros": int(round(index * 1e6)),
            })

    report.summary = summarize(report)
    return report


def _plan_weights(queries, keys, mult, plan):
    """Attention weights over all cache entries, zero outside each query's plan."""
    q = queries.astype(np.float64)
    k = np.asarray(keys, dtype=np.float64)
    bias = np.log(np.asarray(mult, dtype=np.float64))
    logits = (q @ k.T) / math.sqrt(q.shape[1]) + bias
    w = np.zeros_like(logits)
    for i, c in enumerate(plan.candidates):
        row = logits[i, c]
        e = np.exp(row - row.max())
        w[i, c] = e / e.sum()
    return w


def summarize(report):
    methods = report.methods
    primary = "all" if "all" in methods else next((m for m in methods if m != "dense"), "dense")
    dense_time = report.column("dense", "attn_micros").sum()
    out = {}

    def stats(m):
        t = report.column(m, "attn_micros").sum()
        return (float(dense_time / t) if t > 0 else math.inf,
                int(report.column(m, "cache_bytes").max()),
                float(report.column(m, "recall").mean()))

    sp, peak, rec = stats(primary)
    out.update(method=primary, speedup_vs_dense=sp, peak_cache_bytes=peak,
               mean_recall=rec, total_frames=len(report.column("dense", "frame")))
    for m in methods:
        sp, peak, rec = stats(m)
        out[f"speedup_vs_dense_{m}"] = sp
        out[f"peak_cache_bytes_{m}"] = peak
        out[f"mean_recall_{m}"] = rec
    return out


def strip_timing(rows):
    """Rows without the wall-clock columns (the only nondeterministic ones)."""
    return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS} for r in rows]


# ---------------------------------------------------------------- ablations

ABLATIONS = {
    "merge_tol": "tempcache",
    "representative": "tempcache",
    "bits": "annsa",
}
ABLATION_COLUMNS = ("setting", "recall", "entries", "attn_micros")


@dataclass
class AblationRow:
    setting: str
    recall: float
    entries: int
    attn_micros: float


def _apply_setting(cfg, which, setting):
    if which == "merge_tol":
        return replace(cfg, merge_tol=float(setting))
    if which == "bits":
        return replace(cfg, backend="quant", bits=int(setting))
    return replace(cfg, policy=str(setting))


def run_ablation(which, grid, config=None, seeds=None):
    """Re-run a fixed-seed rollout per grid setting.

    Recall is the mean over frames, entries the final cache size, and
    attn_micros the mean per-frame attention time; with several seeds each
    column is the median across seeds.
    """
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation {which!r}", "which")
    if not grid:
        raise ConfigError("ablation grid is empty", "grid")
    base = config or drifting_config()
    seeds = list(seeds) if seeds is not None else [base.seed]
    method = ABLATIONS[which]
    rows = []
    for setting in grid:
        rec, ent, mic = [], [], []
        for seed in seeds:
            cfg = _apply_setting(replace(base, seed=seed), which, setting).validate()
            rep = run_rollout(cfg, methods=(method,))
            rec.append(rep.column(method, "recall").mean())
            ent.append(rep.column(method, "cache_entries")[-1])
            mic.append(rep.column(method, "attn_micros").mean())
        rows.append(AblationRow(str(setting), float(np.median(rec)),
                                int(np.median(ent)), float(np.median(mic))))
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.setting, f"{r.recall:.9g}", r.entries, f"{r.attn_micros:.1f}"])
