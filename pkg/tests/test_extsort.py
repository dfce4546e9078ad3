import hashlib

import numpy as np
import pytest

from coconut_index.core import ConfigError, IntegrityError
from coconut_index.extsort import (
    CountingReader,
    CountingWriter,
    IOStats,
    RunSet,
    external_sort,
    merge_runs,
    partition_into_runs,
    record_dtype,
    sort_records,
)

KEY = 4


def make_records(rng, count, key_values=50, payload=None):
    dt = record_dtype(KEY, payload)
    recs = np.zeros(count, dtype=dt)
    keys = rng.integers(0, key_values, size=count).astype(">u4")
    recs["key"] = keys.view(np.uint8).reshape(count, KEY)
    recs["offset"] = rng.permutation(count).astype(np.uint64) * 1024
    if payload:
        recs["payload"] = rng.normal(size=(count, payload))
    return recs


def oracle_order(recs):
    """Python sort on (key bytes, offset)."""
    return sorted((r["key"].tobytes(), int(r["offset"])) for r in recs)


def as_pairs(recs):
    return [(r["key"].tobytes(), int(r["offset"])) for r in recs]


def multiset_hash(raw: bytes, size: int):
    digests = sorted(hashlib.sha1(raw[i : i + size]).digest() for i in range(0, len(raw), size))
    return hashlib.sha1(b"".join(digests)).hexdigest()


def chunked(recs, size=777):
    for i in range(0, len(recs), size):
        yield recs[i : i + size]


def test_record_layout():
    dt = record_dtype(16, 256)
    assert dt.itemsize == 16 + 8 + 1024
    assert dt.fields["offset"][1] == 16
    assert dt["offset"].str == "<u8"


def test_sort_records_matches_python_sort(rng):
    recs = make_records(rng, 3000, key_values=20)
    assert as_pairs(sort_records(recs)) == oracle_order(recs)


def test_small_budget_forces_runs_and_preserves_multiset(rng, tmp_path):
    recs = make_records(rng, 100_000, key_values=5000)
    dt = recs.dtype
    runs = partition_into_runs(chunked(recs, 3333), dt, 20_000 * dt.itemsize, tmpdir=tmp_path)
    try:
        assert len(runs.paths) == 5
        assert runs.counts == [20_000] * 5
        blob = b"".join(p.read_bytes() for p in runs.paths)
        for p in runs.paths:
            run = np.frombuffer(p.read_bytes(), dtype=dt)
            assert as_pairs(run) == sorted(as_pairs(run))
            assert p.stat().st_size <= 20_000 * dt.itemsize
        assert multiset_hash(blob, dt.itemsize) == multiset_hash(recs.tobytes(), dt.itemsize)
    finally:
        runs.cleanup()


def test_empty_input(tmp_path):
    dt = record_dtype(KEY)
    runs = partition_into_runs(iter([]), dt, 1 << 16, tmpdir=tmp_path)
    assert runs.paths == [] and runs.total == 0
    out = tmp_path / "out.bin"
    assert merge_runs(runs, out) == 0
    assert out.read_bytes() == b""


def test_sorted_input_fitting_in_memory_is_one_run(rng, tmp_path):
    recs = sort_records(make_records(rng, 500))
    runs = partition_into_runs(chunked(recs, 64), recs.dtype, 1 << 20, tmpdir=tmp_path)
    assert len(runs.paths) == 1
    assert runs.paths[0].read_bytes() == recs.tobytes()
    out = tmp_path / "out.bin"
    merge_runs(runs, out)
    assert out.read_bytes() == recs.tobytes()


def test_two_interleaved_runs_merge_exactly(tmp_path):
    dt = record_dtype(1)
    a = np.zeros(3, dtype=dt)
    b = np.zeros(3, dtype=dt)
    a["key"][:, 0], a["offset"] = [1, 3, 5], [0, 1, 2]
    b["key"][:, 0], b["offset"] = [1, 2, 6], [3, 4, 5]
    paths = [tmp_path / "a.bin", tmp_path / "b.bin"]
    paths[0].write_bytes(a.tobytes())
    paths[1].write_bytes(b.tobytes())
    out = tmp_path / "m.bin"
    assert merge_runs(RunSet(paths, [3, 3], dt), out) == 6
    merged = np.frombuffer(out.read_bytes(), dtype=dt)
    assert merged["key"][:, 0].tolist() == [1, 1, 2, 3, 5, 6]
    assert merged["offset"].tolist() == [0, 3, 4, 1, 2, 5]
    assert not any(p.exists() for p in paths)


def test_corrupt_run_names_the_run(tmp_path):
    dt = record_dtype(1)
    good = np.zeros(2, dtype=dt)
    good["key"][:, 0] = [1, 2]
    bad = np.zeros(3, dtype=dt)
    bad["key"][:, 0] = [5, 4, 9]
    paths = [tmp_path / "run-good.bin", tmp_path / "run-bad.bin"]
    paths[0].write_bytes(good.tobytes())
    paths[1].write_bytes(bad.tobytes())
    with pytest.raises(IntegrityError, match="run-bad.bin"):
        merge_runs(RunSet(paths, [2, 3], dt), tmp_path / "out.bin")


def test_truncated_run_is_an_integrity_error(tmp_path):
    dt = record_dtype(1)
    path = tmp_path / "run.bin"
    path.write_bytes(b"\0" * (dt.itemsize + 3))
    with pytest.raises(IntegrityError):
        merge_runs(RunSet([path], [1], dt), tmp_path / "out.bin")


@pytest.mark.parametrize("payload", [None, 8])
def test_external_sort_equals_in_memory_sort(rng, tmp_path, payload):
    recs = make_records(rng, 100_000, key_values=3000, payload=payload)
    out = tmp_path / "sorted.bin"
    budget = 16_000 * recs.dtype.itemsize
    report = external_sort(chunked(recs, 5000), recs.dtype, out, budget, tmpdir=tmp_path)
    got = np.frombuffer(out.read_bytes(), dtype=recs.dtype)
    assert report.records == len(recs)
    assert report.runs == 7 and report.merge_levels == 0
    assert got.tobytes() == sort_records(recs).tobytes()
    assert as_pairs(got[:2000]) == oracle_order(recs)[:2000]
    # two writes (runs, output) and one read (runs) of the whole input
    size = recs.nbytes
    assert report.stats.bytes_written == 2 * size
    assert report.stats.bytes_read == size
    assert list(tmp_path.glob("coconut-sort-*")) == []


def test_multi_level_merge(rng, tmp_path):
    recs = make_records(rng, 20_000, key_values=1000)
    size = recs.dtype.itemsize
    budget = 4 * 64 * size  # fan-in 3 with block size of 64 records
    report = external_sort(chunked(recs, 999), recs.dtype, tmp_path / "o.bin", budget, block_size=64 * size,
                           tmpdir=tmp_path)
    assert report.fan_in == 3
    assert report.runs > report.fan_in and report.merge_levels >= 2
    got = np.frombuffer((tmp_path / "o.bin").read_bytes(), dtype=recs.dtype)
    assert got.tobytes() == sort_records(recs).tobytes()


def test_in_memory_when_everything_fits(rng, tmp_path):
    recs = make_records(rng, 1000)
    report = external_sort(chunked(recs), recs.dtype, tmp_path / "o.bin", 1 << 24, tmpdir=tmp_path)
    assert report.runs == 1
    assert report.stats.bytes_read == 0
    assert report.stats.bytes_written == recs.nbytes


def test_budget_below_two_records(tmp_path):
    dt = record_dtype(KEY)
    with pytest.raises(ConfigError):
        partition_into_runs(iter([]), dt, dt.itemsize, tmpdir=tmp_path)


def test_dtype_mismatch_cleans_up(rng, tmp_path):
    recs = make_records(rng, 100)
    with pytest.raises(ConfigError):
        partition_into_runs(iter([recs, np.zeros(5, dtype=record_dtype(KEY, 2))]), recs.dtype, 40 * recs.dtype.itemsize,
                            tmpdir=tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_tmpdir_environment_override(rng, tmp_path, monkeypatch):
    monkeypatch.setenv("COCONUT_TMPDIR", str(tmp_path))
    recs = make_records(rng, 1000)
    runs = partition_into_runs(chunked(recs), recs.dtype, 100 * recs.dtype.itemsize)
    try:
        assert runs.paths[0].parent.parent == tmp_path
        assert runs.paths[0].name == "run-00-000000.bin"
    finally:
        runs.cleanup()


def test_counting_reader_and_writer(tmp_path):
    stats = IOStats()
    path = tmp_path / "f.bin"
    with CountingWriter(path, stats, buffer_size=4) as w:
        w.write(b"abcdef")
        w.write(b"gh")
    assert stats.bytes_written == 8
    with CountingReader(path, stats, trace=True) as r:
        assert r.pread(0, 3) == b"abc"
        assert r.read(2) == b"de"
        assert r.pread(7, 5) == b"h"
        assert r.offsets == [0, 3, 7]
    assert stats.bytes_read == 6 and stats.reads == 3 and stats.seeks == 1
