import numpy as np
import pytest

from coconut_index import EngineConfig, build_tree, build_trie, generate_queries, generate_random_walk

SMALL_N = 10_001
SMALL_LEN = 256


@pytest.fixture(scope="session")
def small_raw(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "walks.bin"
    generate_random_walk(path, SMALL_N, SMALL_LEN, seed=7)
    return path


@pytest.fixture(scope="session")
def small_queries(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "queries.bin"
    generate_queries(path, 12, SMALL_LEN, seed=7)
    return path


@pytest.fixture(scope="session")
def small_config():
    return EngineConfig(series_len=SMALL_LEN)


@pytest.fixture(scope="session", params=[("tree", False), ("tree", True), ("trie", False), ("trie", True)],
                ids=["tree", "tree-mat", "trie", "trie-mat"])
def built_index(request, small_raw, small_config, tmp_path_factory):
    kind, mat = request.param
    out = tmp_path_factory.mktemp("idx") / f"{kind}-{int(mat)}.idx"
    builder = build_tree if kind == "tree" else build_trie
    report = builder(small_raw, out, small_config, materialized=mat)
    return kind, mat, out, report


@pytest.fixture(scope="session")
def tree_index(small_raw, small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("idx") / "tree.idx"
    report = build_tree(small_raw, out, small_config)
    return out, report


@pytest.fixture(scope="session")
def trie_index(small_raw, small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("idx") / "trie.idx"
    report = build_trie(small_raw, out, small_config)
    return out, report


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}")
