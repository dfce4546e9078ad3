import numpy as np
import pytest

from coconut_index.core import ConfigError, EngineConfig, read_series
from coconut_index.datagen import generate_random_walk
from coconut_index.index import open_index
from coconut_index.query import (
    EmptyIndexError,
    approx_search,
    brute_force_nn,
    compute_mindists,
    exact_search,
)
from coconut_index.tree import build_tree
from coconut_index.trie import build_trie

from conftest import SMALL_LEN, SMALL_N


def scan_oracle(data, q):
    """Distances computed point by point in reversed order, independent of the library."""
    d = np.sqrt(((data[:, ::-1] - q[::-1]) ** 2).sum(axis=1))
    best = int(np.argmin(d))
    return d[best], best * 4 * data.shape[1]


@pytest.fixture(scope="module")
def data(small_raw):
    return read_series(small_raw, SMALL_LEN)


@pytest.fixture(scope="module")
def queries(small_queries):
    return read_series(small_queries, SMALL_LEN)


def test_exact_matches_oracle(built_index, small_raw, data, queries):
    _, mat, path, _ = built_index
    with open_index(path, None if mat else small_raw) as idx:
        for q in queries:
            res = exact_search(idx, q)
            dist, off = scan_oracle(data, q)
            assert abs(res.distance - dist) <= 1e-6 * dist
            assert res.offset == off
            assert res.series_fetched < SMALL_N
            assert res.summaries_scanned == SMALL_N
            assert res.bytes_read > 0


def test_brute_force_matches_oracle(small_raw, data, queries):
    for q in queries[:4]:
        res = brute_force_nn(small_raw, q)
        dist, off = scan_oracle(data, q)
        assert abs(res.distance - dist) <= 1e-9 * dist and res.offset == off
        assert res.series_fetched == SMALL_N


def test_stored_series_is_found_exactly(built_index, small_raw, data, rng):
    _, mat, path, _ = built_index
    with open_index(path, small_raw) as idx:
        for row in rng.integers(0, SMALL_N, 5):
            q = data[row]
            approx = approx_search(idx, q, radius=0)
            assert approx.distance == 0.0 and approx.offset == row * 1024
            exact = exact_search(idx, q)
            assert exact.distance == 0.0 and exact.offset == row * 1024


def test_radius_monotone(built_index, small_raw, queries):
    _, _, path, _ = built_index
    with open_index(path, small_raw) as idx:
        for q in queries:
            d = [approx_search(idx, q, r).distance for r in (0, 1, 10)]
            assert d[0] >= d[1] >= d[2]
            leaves = [approx_search(idx, q, r).leaves_visited for r in (0, 1)]
            assert leaves[0] == 1 and leaves[1] <= 3


def test_audit_reports_no_violations(built_index, small_raw, queries):
    _, _, path, _ = built_index
    with open_index(path, small_raw) as idx:
        for q in queries[:4]:
            assert exact_search(idx, q, audit=True).pruning_violations == 0
            assert exact_search(idx, q).pruning_violations is None


def test_workers_do_not_change_results(tree_index, small_raw, queries):
    path, _ = tree_index
    runs = {}
    for workers in (1, 4):
        # a fresh index each time so cache state is identical
        with open_index(path, small_raw) as idx:
            runs[workers] = [exact_search(idx, q, workers=workers).to_dict() for q in queries[:4]]
            with open_index(path, small_raw) as other:
                np.testing.assert_array_equal(compute_mindists(idx, queries[0], 1),
                                              compute_mindists(other, queries[0], workers))
    for a, b in zip(runs[1], runs[4]):
        a.pop("seconds"), b.pop("seconds")
        assert a == b


def test_single_leaf_approx_is_exact(tmp_path):
    raw = tmp_path / "d.bin"
    generate_random_walk(raw, 500, 64, seed=2)
    cfg = EngineConfig(series_len=64, segment_count=8)
    build_tree(raw, tmp_path / "d.idx", cfg)
    data = read_series(raw, 64)
    q = np.random.default_rng(1).normal(size=64)
    with open_index(tmp_path / "d.idx", raw) as idx:
        assert idx.leaf_count == 1
        res = approx_search(idx, q, radius=0)
    dist, off = scan_oracle(data, q)
    assert res.distance == pytest.approx(dist, rel=1e-12) and res.offset == off


def test_duplicates_resolve_to_lowest_offset(tmp_path):
    raw = tmp_path / "dup.bin"
    generate_random_walk(raw, 300, 64, seed=5)
    data = read_series(raw, 64).astype("<f4")
    data[250] = data[40]
    data[10] = data[40]
    data.tofile(raw)
    cfg = EngineConfig(series_len=64, segment_count=8, leaf_capacity=4)
    for builder in (build_tree, build_trie):
        out = tmp_path / f"{builder.__name__}.idx"
        builder(raw, out, cfg)
        with open_index(out, raw) as idx:
            q = data[250].astype(np.float64)
            assert exact_search(idx, q).offset == 10 * 256
            assert approx_search(idx, q, radius=100).offset == 10 * 256
    assert brute_force_nn(raw, data[250]).offset == 10 * 256


def test_empty_index_raises(tmp_path):
    raw = tmp_path / "empty.bin"
    raw.write_bytes(b"")
    cfg = EngineConfig(series_len=64, segment_count=8)
    for builder in (build_tree, build_trie):
        out = tmp_path / f"{builder.__name__}.idx"
        report = builder(raw, out, cfg)
        assert report.records == 0 and report.leaf_count == 0
        with open_index(out, raw) as idx:
            with pytest.raises(EmptyIndexError):
                approx_search(idx, np.zeros(64))
            with pytest.raises(EmptyIndexError):
                exact_search(idx, np.zeros(64))
    with pytest.raises(EmptyIndexError):
        brute_force_nn(raw, np.zeros(64))


def test_query_shape_checked(tree_index, small_raw):
    path, _ = tree_index
    with open_index(path, small_raw) as idx:
        with pytest.raises(ConfigError):
            exact_search(idx, np.zeros(100))
        with pytest.raises(ConfigError):
            approx_search(idx, np.zeros(SMALL_LEN), radius=-1)


def test_non_materialized_needs_raw(tree_index):
    path, _ = tree_index
    with open_index(path) as idx:
        with pytest.raises(ConfigError):
            approx_search(idx, np.zeros(SMALL_LEN))


def test_single_series_brute_force(tmp_path):
    raw = tmp_path / "one.bin"
    generate_random_walk(raw, 1, 32, seed=0)
    row = read_series(raw, 32)[0]
    res = brute_force_nn(raw, row + 1.0)
    assert res.offset == 0 and res.distance == pytest.approx(np.sqrt(32))
