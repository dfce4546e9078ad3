import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from coconut_index.cli import main
from coconut_index.core import EngineConfig


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def read_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    return [r for r in rows if r["query_id"] != "mean"], [r for r in rows if r["query_id"] == "mean"]


@pytest.fixture(scope="module")
def cli_files(small_raw, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    q = d / "q.bin"
    assert main(["gen", "--count", "8", "--seed", "3", "--workload", "--out", str(q)]) == 0
    tree, trie = d / "tree.idx", d / "trie.idx"
    assert main(["build", str(small_raw), "--index", "tree", "--out", str(tree), "--report", str(d / "tree.json")]) == 0
    assert main(["build", str(small_raw), "--index", "trie", "--out", str(trie), "--report", str(d / "trie.json")]) == 0
    return d, q, tree, trie


def test_gen_size_and_determinism(capsys, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert run(capsys, "gen", "--count", 1000, "--length", 256, "--seed", 7, "--out", a)[0] == 0
    assert run(capsys, "gen", "--count", 1000, "--length", 256, "--seed", 7, "--out", b)[0] == 0
    assert a.stat().st_size == 1_024_000
    assert a.read_bytes() == b.read_bytes()


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run(capsys, "gen", "--count", 10)[0] == 1
    assert run(capsys, "nonsense")[0] == 1
    assert run(capsys)[0] == 1
    assert run(capsys, "gen", "--count", 0, "--out", tmp_path / "x.bin")[0] == 1


def test_build_reports(cli_files):
    d, _, _, _ = cli_files
    tree = json.loads((d / "tree.json").read_text())
    trie = json.loads((d / "trie.json").read_text())
    assert tree["leaf_count"] == 6
    assert trie["mean_utilization"] < tree["mean_utilization"]
    assert tree["config"] == EngineConfig().to_dict()
    for key in ("wall_time", "raw_stats", "sort_stats", "sort_passes", "depth", "mean_utilization"):
        assert key in tree


def test_build_flag_errors(capsys, small_raw, tmp_path):
    code, _, err = run(capsys, "build", small_raw, "--segments", 15, "--out", tmp_path / "x.idx")
    assert code == 1 and "--segments" in err
    code, _, err = run(capsys, "build", small_raw, "--fill", 0.2, "--out", tmp_path / "x.idx")
    assert code == 1 and "--fill" in err
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"\0" * 1000)
    assert run(capsys, "build", bad, "--out", tmp_path / "y.idx")[0] == 2
    assert run(capsys, "build", tmp_path / "missing.bin", "--out", tmp_path / "y.idx")[0] == 2


def test_oracle_and_exact_agree(capsys, cli_files, small_raw):
    _, q, tree, trie = cli_files
    code, oracle_out, _ = run(capsys, "query", tree, "--queries", q, "--raw", small_raw, "--mode", "oracle")
    assert code == 0
    oracle, summary = read_csv(oracle_out)
    assert len(oracle) == 8 and len(summary) == 1
    for idx in (tree, trie):
        code, out, _ = run(capsys, "query", idx, "--queries", q, "--raw", small_raw, "--mode", "exact")
        assert code == 0
        exact, _ = read_csv(out)
        for a, b in zip(oracle, exact):
            assert abs(float(a["distance"]) - float(b["distance"])) <= 1e-6 * float(a["distance"])
            assert a["offset"] == b["offset"]


def test_radius_sweep_mean(capsys, cli_files, small_raw, tmp_path):
    _, q, tree, _ = cli_files
    means = {}
    for r in (1, 10):
        out = tmp_path / f"r{r}.csv"
        assert run(capsys, "query", tree, "--queries", q, "--raw", small_raw, "--mode", "approx",
                   "--radius", r, "--out", out)[0] == 0
        _, summary = read_csv(out.read_text())
        means[r] = float(summary[0]["distance"])
    assert means[10] <= means[1]


def test_empty_workload_gives_header_only(capsys, cli_files, small_raw, tmp_path):
    _, _, tree, _ = cli_files
    empty = tmp_path / "empty.bin"
    assert run(capsys, "gen", "--count", 0, "--workload", "--out", empty)[0] == 0
    code, out, _ = run(capsys, "query", tree, "--queries", empty, "--raw", small_raw, "--mode", "approx")
    assert code == 0
    assert out.strip() == "query_id,distance,offset,leaves_visited,series_fetched,summaries_scanned,bytes_read,seconds"


def test_workload_mismatch(capsys, cli_files, small_raw, tmp_path):
    _, q, tree, _ = cli_files
    short = tmp_path / "short.bin"
    assert run(capsys, "gen", "--count", 3, "--length", 100, "--workload", "--out", short)[0] == 0
    assert run(capsys, "query", tree, "--queries", short, "--raw", small_raw)[0] == 2
    assert run(capsys, "query", tree, "--queries", short, "--raw", small_raw, "--length", 100)[0] == 1
    assert run(capsys, "query", tree, "--queries", q, "--mode", "oracle")[0] == 1


def test_integrity_error_exit_3(capsys, cli_files, tmp_path):
    _, q, tree, _ = cli_files
    other = tmp_path / "other.bin"
    assert run(capsys, "gen", "--count", 10, "--out", other)[0] == 0
    code, _, err = run(capsys, "query", tree, "--queries", q, "--raw", other)
    assert code == 3 and "integrity" in err


def test_bench_two_rows(capsys, tmp_path):
    scenario = tmp_path / "s.json"
    scenario.write_text(json.dumps({
        "datasets": [{"count": 20000, "length": 128, "seed": 1}],
        "indexes": ["tree", "trie"],
        "segments": 8,
        "memory_budgets": [64 * 1024, 1 << 20],
        "queries": {"count": 3, "seed": 2},
        "modes": ["approx", "exact"],
        "radius": [1, 10],
    }))
    out = tmp_path / "report.json"
    code, _, _ = run(capsys, "bench", "--scenario", scenario, "--out", out)
    assert code == 0
    report = json.loads(out.read_text())
    rows = report["rows"]
    assert len(rows) == 4
    tree = [r for r in rows if r["index"] == "tree"]
    trie = [r for r in rows if r["index"] == "trie"]
    assert tree[0]["build"]["leaf_count"] < trie[0]["build"]["leaf_count"]
    for r in rows:
        assert r["build"]["sort_read_passes"] <= 2.05 and r["build"]["sort_write_passes"] <= 2.05
        assert set(r["queries"]) == {"approx(r=1)", "approx(r=10)", "exact(r=1)", "exact(r=10)"}
        assert r["build"]["config"]["memory_budget"] == r["memory_budget"]
    assert tree[0]["build"]["sort_runs"] >= 4


def test_bench_errors(capsys, tmp_path):
    empty = tmp_path / "empty.json"
    empty.write_text("{}")
    assert run(capsys, "bench", "--scenario", empty)[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"datasets": [{"count": 100, "length": 64}], "indexes": ["tree"], "segments": 7}))
    code, out, _ = run(capsys, "bench", "--scenario", bad)
    assert code == 2
    assert "error" in json.loads(out)["rows"][0]


def test_module_entry_point(tmp_path):
    out = tmp_path / "d.bin"
    proc = subprocess.run([sys.executable, "-m", "coconut_index", "gen", "--count", "5", "--out", str(out)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.stat().st_size == 5 * 1024
    proc = subprocess.run([sys.executable, "-m", "coconut_index", "build"], capture_output=True, text=True)
    assert proc.returncode == 1
