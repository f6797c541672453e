import csv
import struct
import subprocess
import sys

import numpy as np
import pytest

from streamattn.cli import main
from streamattn.metrics import TIMING_COLUMNS, read_metrics_csv
from streamattn.tensor import read_qkv, write_qkv
from streamattn.verify import planted_duplicates

SMALL = ["--set", "tokens_per_frame=16", "--set", "tracks=16", "--set", "queries_per_frame=8",
         "--set", "prompt_len=16"]


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("frames=1\ntokens_per_frame=16\ntracks=16\nqueries_per_frame=8\nprompt_len=16\n")
    return path


def test_rollout_single_frame(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["rollout", "--config", str(cfg_file), "--out", str(out)]) == 0
    rows = read_metrics_csv(out / "metrics.csv")
    assert sorted(r["method"] for r in rows) == sorted(["dense", "tempcache", "annsa", "annca", "all"])
    summary = (out / "summary.txt").read_text()
    assert "speedup_vs_dense=" in summary and "total_frames=1" in summary


def test_override_supersedes_file(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["rollout", "--config", str(cfg_file), "--out", str(out), "--set", "frames=3",
                 "--methods", "tempcache"]) == 0
    rows = read_metrics_csv(out / "metrics.csv")
    assert len(rows) == 6
    assert "frames=3" in (out / "config.txt").read_text().splitlines()


def test_rollout_speedup(tmp_path):
    out = tmp_path / "run"
    assert main(["rollout", "--out", str(out), "--set", "frames=150"]) == 0
    kv = dict(l.split("=", 1) for l in (out / "summary.txt").read_text().splitlines())
    assert kv["method"] == "all"
    assert float(kv["speedup_vs_dense"]) > 1.0


@pytest.mark.parametrize("args,key", [
    (["--set", "framez=3"], "framez"),
    (["--set", "merge_tol=2"], "merge_tol"),
    (["--set", "backend=faiss"], "backend"),
    (["--config", "/nonexistent/c.txt"], "config"),
])
def test_bad_config_exit_2(tmp_path, capsys, args, key):
    assert main(["rollout", "--out", str(tmp_path / "x")] + args) == 2
    assert key in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_nan_exit_3(tmp_path, monkeypatch):
    from streamattn import cli
    from streamattn.exceptions import NonFiniteError

    def boom(*a, **k):
        raise NonFiniteError("non-finite attention output at frame 0, method dense")

    monkeypatch.setattr(cli, "run_rollout", boom)
    assert main(["rollout", "--out", str(tmp_path / "x")]) == 3


def test_determinism_across_runs(tmp_path):
    def run(name):
        out = tmp_path / name
        assert main(["rollout", "--out", str(out), "--set", "frames=4", "--seed", "5"] + SMALL) == 0
        return [{k: v for k, v in r.items() if k not in TIMING_COLUMNS}
                for r in read_metrics_csv(out / "metrics.csv")]
    assert run("a") == run("b")


def test_ablate(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--which", "merge_tol", "--grid", "1.0,0.9", "--out", str(out),
                 "--set", "frames=5", "--set", "merge_tol=0.9"] + SMALL) == 0
    lines = (out / "ablation_merge_tol.csv").read_text().splitlines()
    assert lines[0] == "setting,recall,entries,attn_micros" and len(lines) == 3


def read_stats(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _qkv(tmp_path, rng, q, k, v):
    paths = []
    for name, m in (("q", q), ("k", k), ("v", v)):
        p = tmp_path / f"{name}.qkv"
        write_qkv(p, m)
        paths.append(str(p))
    return paths


def _attend(tmp_path, paths, method, *extra):
    out = tmp_path / method
    code = main(["attend", "--q", paths[0], "--k", paths[1], "--v", paths[2],
                 "--method", method, "--out", str(out), *extra])
    return code, out


def test_attend_dense_single_key(tmp_path, rng):
    v = rng.standard_normal((1, 3)).astype(np.float32)
    paths = _qkv(tmp_path, rng, rng.standard_normal((4, 6)), rng.standard_normal((1, 6)), v)
    code, out = _attend(tmp_path, paths, "dense")
    assert code == 0
    np.testing.assert_array_equal(read_qkv(out / "output.qkv"), np.repeat(v, 4, axis=0))


def test_attend_grouped_duplicates(tmp_path, rng):
    k, v = planted_duplicates(rng, 6, 40, 8, 4)
    paths = _qkv(tmp_path, rng, rng.standard_normal((5, 8)), k, v)
    code, out = _attend(tmp_path, paths, "grouped", "--set", "tol=1.0")
    assert code == 0
    (row,) = read_stats(out / "stats.csv")
    assert float(row["max_abs_err"]) <= 1e-6
    assert float(row["density"]) == pytest.approx(6 / 40)


def test_attend_annsa_full_density_matches_dense(tmp_path, rng):
    paths = _qkv(tmp_path, rng, rng.standard_normal((5, 8)), rng.standard_normal((30, 8)),
                 rng.standard_normal((30, 3)))
    _, dense_out = _attend(tmp_path, paths, "dense")
    code, sparse_out = _attend(tmp_path, paths, "annsa", "--set", "density=1.0")
    assert code == 0
    assert (sparse_out / "output.qkv").read_bytes() == (dense_out / "output.qkv").read_bytes()


def test_attend_bad_files(tmp_path, rng):
    paths = _qkv(tmp_path, rng, rng.standard_normal((2, 4)), rng.standard_normal((3, 4)),
                 rng.standard_normal((3, 2)))
    bad = tmp_path / "bad.qkv"
    bad.write_bytes(b"XXXX" + struct.pack("<III", 2, 3, 4) + bytes(48))
    assert _attend(tmp_path, [paths[0], str(bad), paths[2]], "dense")[0] == 2
    short = tmp_path / "short.qkv"
    short.write_bytes((tmp_path / "k.qkv").read_bytes()[:-4])
    assert _attend(tmp_path, [paths[0], str(short), paths[2]], "dense")[0] == 2
    # consistent files but mismatched dims
    wrong = tmp_path / "w.qkv"
    write_qkv(wrong, rng.standard_normal((3, 5)))
    assert _attend(tmp_path, [paths[0], str(wrong), paths[2]], "dense")[0] == 2
    assert _attend(tmp_path, paths, "grouped", "--set", "tolerance=1")[0] == 2


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "grouped_exactness" in out


def test_verify_fault_fails(capsys):
    assert main(["verify", "--fault", "no-log-bias"]) == 1
    out = capsys.readouterr().out
    assert "FAIL grouped_exactness" in out
    assert "failed: grouped_exactness" in out


def test_verify_seed_output_identical(capsys):
    main(["verify", "--seed", "7"])
    a = capsys.readouterr().out
    main(["verify", "--seed", "7"])
    assert capsys.readouterr().out == a


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "streamattn", "verify", "--seed", "1"],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
