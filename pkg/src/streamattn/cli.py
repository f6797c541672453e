"""Command-line entry point: ``streamattn {rollout,ablate,attend,verify}``.

Exit codes: 0 success, 1 property failure, 2 input error, 3 numeric failure.
"""
import argparse
import csv
import os
import sys
import time

import numpy as np

from .ann import AnnConfig
from .attention import dense_attention, group_duplicates, grouped_attention
from .exceptions import (
    ConfigError,
    EmptyContextError,
    FormatError,
    InvariantError,
    NonFiniteError,
    ShapeError,
)
from .metrics import overlap_recall
from .rollout import (
    ABLATIONS,
    METHODS,
    dump_config,
    load_config,
    parse_overrides,
    run_ablation,
    run_rollout,
    write_ablation_csv,
)
from .sparse import execute_sparse, plan_self_attention
from .tensor import read_qkv, write_qkv
from .verify import run_checks

EXIT_OK, EXIT_PROPERTY, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
ATTEND_PARAMS = {"tol": float, "density": float, "backend": str, "bits": int,
                 "tables": int, "hash_bits": int, "seed": int}
ATTEND_COLUMNS = ("method", "density", "recall", "max_abs_err", "candidates_total",
                  "attn_micros", "index_micros")


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file not found: {args.config}", "config")
        return load_config(args.config, overrides)
    return parse_overrides(overrides).validate()


def cmd_rollout(args):
    cfg = _config(args)
    methods = args.methods.split(",") if args.methods else METHODS
    report = run_rollout(cfg, methods, time_include_index=args.time_include_index)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "metrics.csv"))
    report.write_summary(os.path.join(args.out, "summary.txt"))
    dump_config(cfg, os.path.join(args.out, "config.txt"))
    s = report.summary
    print(f"frames={s['total_frames']} method={s['method']} "
          f"speedup_vs_dense={s['speedup_vs_dense']:.2f} mean_recall={s['mean_recall']:.4f} "
          f"peak_cache_bytes={s['peak_cache_bytes']}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = _config(args) if (args.config or args.set or args.seed is not None) else None
    if args.which == "merge_tol":
        grid = [float(x) for x in args.grid.split(",")]
    elif args.which == "bits":
        grid = [int(x) for x in args.grid.split(",")]
    else:
        grid = args.grid.split(",")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rows = run_ablation(args.which, grid, cfg, seeds)
    os.makedirs(args.out, exist_ok=True)
    write_ablation_csv(os.path.join(args.out, f"ablation_{args.which}.csv"), rows)
    for r in rows:
        print(f"{r.setting}\trecall={r.recall:.4f}\tentries={r.entries}")
    return EXIT_OK


def _attend_params(pairs):
    params = {"tol": 1.0, "density": 0.25, "backend": "quant", "bits": 8, "tables": 8,
              "hash_bits": 10, "seed": 0}
    for pair in pairs or ():
        key, _, raw = pair.partition("=")
        key = key.strip()
        if key not in ATTEND_PARAMS:
            raise ConfigError(f"unknown attend parameter {key!r}", key)
        try:
            params[key] = ATTEND_PARAMS[key](raw.strip())
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r}", key) from None
    return params


def cmd_attend(args):
    params = _attend_params(args.set)
    q, k, v = read_qkv(args.q), read_qkv(args.k), read_qkv(args.v)
    ref = dense_attention(q, k, v, want_weights=True)
    index_s = 0.0
    t0 = time.perf_counter()
    if args.method == "dense":
        out = ref.output
        density, recall, cands = 1.0, 1.0, q.shape[0] * k.shape[0]
        attn_s = time.perf_counter() - t0
    elif args.method == "grouped":
        g = group_duplicates(k, v, params["tol"])
        index_s = time.perf_counter() - t0
        t1 = time.perf_counter()
        res = grouped_attention(q, g, want_weights=True)
        attn_s = time.perf_counter() - t1
        out = res.output
        density = g.groups / k.shape[0]
        cands = q.shape[0] * g.groups
        recall = overlap_recall(ref.weights, g.assignment, res.weights, g.multiplicities)
    else:
        backend = AnnConfig(params["backend"], params["bits"], params["tables"],
                            params["hash_bits"], params["seed"])
        plan = plan_self_attention(q, k, backend, params["density"])
        index_s = time.perf_counter() - t0
        res, stats = execute_sparse(q, k, v, plan, reference=ref)
        attn_s = stats.wall_time
        out = res.output
        density, recall, cands = plan.density, stats.recall, plan.candidates_total
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("attention output is not finite")
    if args.time_include_index:
        attn_s += index_s
    err = float(np.max(np.abs(out - ref.output)))
    os.makedirs(args.out, exist_ok=True)
    write_qkv(os.path.join(args.out, "output.qkv"), out)
    with open(os.path.join(args.out, "stats.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATTEND_COLUMNS)
        w.writerow([args.method, f"{density:.9g}", f"{recall:.9g}", f"{err:.9g}", cands,
                    int(round(attn_s * 1e6)), int(round(index_s * 1e6))])
    print(f"method={args.method} density={density:.4f} recall={recall:.4f} max_abs_err={err:.3g}")
    return EXIT_OK


def cmd_verify(args):
    results = run_checks(seed=args.seed if args.seed is not None else 0,
                         log_bias=args.fault != "no-log-bias")
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_PROPERTY
    print(f"all {len(results)} properties passed")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="streamattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="flat key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int)

    r = sub.add_parser("rollout", help="run a synthetic rollout")
    common(r)
    r.add_argument("--out", required=True)
    r.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
    r.add_argument("--time-include-index", action="store_true")
    r.set_defaults(func=cmd_rollout)

    a = sub.add_parser("ablate", help="sweep one setting over a grid")
    common(a)
    a.add_argument("--which", required=True, choices=sorted(ABLATIONS))
    a.add_argument("--grid", required=True, help="comma-separated settings")
    a.add_argument("--seeds", help="comma-separated seeds (median is reported)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    t = sub.add_parser("attend", help="attention over QKV1 tensor files")
    t.add_argument("--q", required=True)
    t.add_argument("--k", required=True)
    t.add_argument("--v", required=True)
    t.add_argument("--method", choices=("dense", "grouped", "annsa"), default="dense")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help=f"method parameter: {', '.join(ATTEND_PARAMS)}")
    t.add_argument("--out", required=True)
    t.add_argument("--time-include-index", action="store_true")
    t.set_defaults(func=cmd_attend)

    v = sub.add_parser("verify", help="run the oracle/property suite")
    common(v, config=False)
    v.add_argument("--fault", choices=("no-log-bias",),
                   help="inject a fault (negative control)")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if exc.key else ""
        print(f"error{key}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FormatError, ShapeError, EmptyContextError, InvariantError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
