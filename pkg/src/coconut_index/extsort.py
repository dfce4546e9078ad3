"""External sort of fixed-size records under a memory budget.

Records are numpy structured rows laid out as ``key bytes | offset (<u8) |
optional payload``; they are ordered by key bytes then offset. Sorting runs in
two phases: the input is cut into sorted runs no larger than the memory budget,
then the runs are k-way merged with one buffer per run. When everything fits
in one run, nothing is spilled and the sorted run is written straight out.

All file traffic goes through :class:`CountingReader` / :class:`CountingWriter`
so that callers can check pass counts against :class:`IOStats`.
"""

from __future__ import annotations

import heapq
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .core import ConfigError, IntegrityError

__all__ = [
    "IOStats",
    "CountingReader",
    "CountingWriter",
    "record_dtype",
    "sort_records",
    "RunSet",
    "partition_into_runs",
    "merge_runs",
    "external_sort",
    "SortReport",
    "temp_root",
]

log = logging.getLogger(__name__)

TMPDIR_ENV = "COCONUT_TMPDIR"


@dataclass
class IOStats:
    bytes_read: int = 0
    bytes_written: int = 0
    reads: int = 0
    writes: int = 0
    seeks: int = 0

    def merge(self, other: "IOStats") -> "IOStats":
        for name in ("bytes_read", "bytes_written", "reads", "writes", "seeks"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class CountingReader:
    """Positioned reads on a file, counted into an :class:`IOStats`.

    A read that does not start where the previous one ended counts as a seek.
    With ``trace=True`` every read offset is kept in ``offsets``.
    """

    def __init__(self, path, stats: IOStats | None = None, trace: bool = False):
        self.path = str(path)
        self.stats = stats if stats is not None else IOStats()
        self._fd = os.open(self.path, os.O_RDONLY | getattr(os, "O_BINARY", 0))
        self._pos = 0
        self.offsets: list[int] | None = [] if trace else None

    def pread(self, offset: int, size: int) -> bytes:
        if offset != self._pos:
            self.stats.seeks += 1
        data = os.pread(self._fd, size, offset)
        self._pos = offset + len(data)
        self.stats.reads += 1
        self.stats.bytes_read += len(data)
        if self.offsets is not None:
            self.offsets.append(offset)
        return data

    def read(self, size: int) -> bytes:
        return self.pread(self._pos, size)

    def seek(self, offset: int) -> None:
        if offset != self._pos:
            self._pos = offset
            self.stats.seeks += 1

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CountingWriter:
    """Buffered sequential writer that counts bytes into an :class:`IOStats`."""

    def __init__(self, path, stats: IOStats | None = None, buffer_size: int = 1 << 16, mode: str = "wb"):
        self.stats = stats if stats is not None else IOStats()
        self._fh = open(path, mode)
        self._buf = bytearray()
        self._limit = buffer_size
        self.written = 0

    def write(self, data) -> None:
        self._buf += data
        self.written += len(data)
        if len(self._buf) >= self._limit:
            self.flush()

    def flush(self) -> None:
        if self._buf:
            self._fh.write(self._buf)
            self.stats.writes += 1
            self.stats.bytes_written += len(self._buf)
            self._buf = bytearray()

    def seek(self, offset: int) -> None:
        self.flush()
        self._fh.seek(offset)

    def close(self) -> None:
        if not self._fh.closed:
            self.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def record_dtype(key_len: int, payload_len: int | None = None) -> np.dtype:
    """Packed record layout; ``payload_len`` is the number of float32 values."""
    fields = [("key", "u1", (key_len,)), ("offset", "<u8")]
    if payload_len:
        fields.append(("payload", "<f4", (payload_len,)))
    return np.dtype(fields)


def _sort_columns(records: np.ndarray) -> list[np.ndarray]:
    keys = records["key"]
    width = keys.shape[1]
    padded_width = -(-width // 8) * 8
    if padded_width != width:
        keys = np.concatenate(
            [keys, np.zeros((keys.shape[0], padded_width - width), dtype=np.uint8)], axis=1
        )
    words = np.ascontiguousarray(keys).view(">u8")
    # np.lexsort sorts by the last column first
    return [records["offset"]] + [words[:, i] for i in range(words.shape[1] - 1, -1, -1)]


def sort_records(records: np.ndarray) -> np.ndarray:
    """In-memory sort by (key bytes, offset)."""
    if len(records) <= 1:
        return records.copy()
    return records[np.lexsort(_sort_columns(records))]


def _merge_key(rec: bytes, key_len: int) -> bytes:
    # big-endian offset after the key gives a single lexicographic comparison
    return rec[:key_len] + rec[key_len : key_len + 8][::-1]


def temp_root(tmpdir=None) -> str | None:
    return str(tmpdir) if tmpdir is not None else os.environ.get(TMPDIR_ENV) or None


@dataclass
class RunSet:
    """Sorted run files produced by :func:`partition_into_runs`."""

    paths: list[Path]
    counts: list[int]
    dtype: np.dtype
    workdir: Path | None = None
    in_memory: np.ndarray | None = field(default=None, repr=False)

    @property
    def record_size(self) -> int:
        return self.dtype.itemsize

    @property
    def total(self) -> int:
        if self.in_memory is not None:
            return len(self.in_memory)
        return sum(self.counts)

    def cleanup(self) -> None:
        for p in self.paths:
            try:
                os.remove(p)
            except FileNotFoundError:
                pass
        if self.workdir is not None:
            shutil.rmtree(self.workdir, ignore_errors=True)
            self.workdir = None
        self.paths = []
        self.counts = []


def _check_budget(dtype: np.dtype, memory_budget: int) -> int:
    if memory_budget < 2 * dtype.itemsize:
        raise ConfigError(
            f"memory budget {memory_budget} B is below two records of {dtype.itemsize} B"
        )
    return memory_budget // dtype.itemsize


def partition_into_runs(
    chunks: Iterable[np.ndarray],
    dtype: np.dtype,
    memory_budget: int,
    stats: IOStats | None = None,
    tmpdir=None,
    spill_single: bool = True,
) -> RunSet:
    """Cut a stream of record chunks into sorted runs of at most ``memory_budget`` bytes.

    With ``spill_single=False`` an input that fits into one run stays in memory
    (``RunSet.in_memory``) instead of being written.
    """
    stats = stats if stats is not None else IOStats()
    capacity = _check_budget(dtype, memory_budget)
    workdir: Path | None = None
    paths: list[Path] = []
    counts: list[int] = []
    pending: list[np.ndarray] = []
    filled = 0

    def flush(block: np.ndarray):
        nonlocal workdir
        if workdir is None:
            workdir = Path(tempfile.mkdtemp(prefix="coconut-sort-", dir=temp_root(tmpdir)))
        path = workdir / f"run-00-{len(paths):06d}.bin"
        with CountingWriter(path, stats) as out:
            out.write(sort_records(block).tobytes())
        paths.append(path)
        counts.append(len(block))

    held: np.ndarray | None = None
    try:
        for chunk in chunks:
            if chunk.dtype != dtype:
                raise ConfigError(f"record dtype {chunk.dtype} does not match {dtype}")
            start = 0
            while start < len(chunk):
                take = min(capacity - filled, len(chunk) - start)
                pending.append(chunk[start : start + take])
                filled += take
                start += take
                if filled == capacity:
                    block = np.concatenate(pending)
                    pending, filled = [], 0
                    if not spill_single and not paths and held is None:
                        # may still turn out to be the only run
                        held = block
                        continue
                    if held is not None:
                        flush(held)
                        held = None
                    flush(block)
        rest = np.concatenate(pending) if pending else np.zeros(0, dtype=dtype)
        if not spill_single and not paths:
            if held is None:
                return RunSet([], [], dtype, None, in_memory=sort_records(rest))
            if not len(rest):
                return RunSet([], [], dtype, None, in_memory=sort_records(held))
        if held is not None:
            flush(held)
        if len(rest):
            flush(rest)
    except BaseException:
        RunSet(paths, counts, dtype, workdir).cleanup()
        raise
    log.debug("partitioned into %d runs", len(paths))
    return RunSet(paths, counts, dtype, workdir)


def _iter_run(path: Path, dtype: np.dtype, key_len: int, buffer_records: int, stats: IOStats) -> Iterator[tuple[bytes, bytes]]:
    size = dtype.itemsize
    prev = None
    with CountingReader(path, stats) as reader:
        offset = 0
        while True:
            block = reader.pread(offset, buffer_records * size)
            if not block:
                return
            if len(block) % size:
                raise IntegrityError(f"run {path.name}: truncated record")
            offset += len(block)
            for i in range(0, len(block), size):
                rec = block[i : i + size]
                mk = _merge_key(rec, key_len)
                if prev is not None and mk < prev:
                    raise IntegrityError(f"run {path.name} is not sorted at byte {offset - len(block) + i}")
                prev = mk
                yield mk, rec


def _merge_group(paths: list[Path], out_path: Path, dtype: np.dtype, buffer_size: int, stats: IOStats) -> int:
    key_len = dtype["key"].shape[0]
    buffer_records = max(1, buffer_size // dtype.itemsize)
    streams = [_iter_run(p, dtype, key_len, buffer_records, stats) for p in paths]
    count = 0
    with CountingWriter(out_path, stats, buffer_size=max(buffer_size, dtype.itemsize)) as out:
        for _, rec in heapq.merge(*streams, key=lambda item: item[0]):
            out.write(rec)
            count += 1
    return count


def merge_runs(
    runs: RunSet,
    out_path,
    stats: IOStats | None = None,
    buffer_size: int = 1 << 16,
    fan_in: int | None = None,
) -> int:
    """Merge sorted runs into ``out_path``; returns the number of records written.

    Runs are merged in one level when their count is at most ``fan_in``;
    otherwise groups of ``fan_in`` runs are merged into intermediate runs first.
    The run files are deleted afterwards.
    """
    stats = stats if stats is not None else IOStats()
    out_path = Path(out_path)
    if runs.in_memory is not None:
        with CountingWriter(out_path, stats) as out:
            out.write(runs.in_memory.tobytes())
        return len(runs.in_memory)
    fan_in = max(2, fan_in or len(runs.paths) or 2)
    paths = list(runs.paths)
    level = 0
    try:
        if not paths:
            open(out_path, "wb").close()
            return 0
        while len(paths) > fan_in:
            level += 1
            merged = []
            for g in range(0, len(paths), fan_in):
                target = runs.workdir / f"run-{level:02d}-{g // fan_in:06d}.bin"
                _merge_group(paths[g : g + fan_in], target, runs.dtype, buffer_size, stats)
                for p in paths[g : g + fan_in]:
                    os.remove(p)
                merged.append(target)
            paths = merged
            runs.paths = paths
        total = _merge_group(paths, out_path, runs.dtype, buffer_size, stats)
    finally:
        runs.cleanup()
    return total


@dataclass
class SortReport:
    records: int
    runs: int
    merge_levels: int
    record_size: int
    memory_budget: int
    fan_in: int
    stats: IOStats

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["stats"] = self.stats.to_dict()
        return d


def external_sort(
    chunks: Iterable[np.ndarray],
    dtype: np.dtype,
    out_path,
    memory_budget: int,
    block_size: int = 4096,
    stats: IOStats | None = None,
    tmpdir=None,
) -> SortReport:
    """Sort a record stream into ``out_path`` using at most ``memory_budget`` bytes of runs.

    The fan-in is the number of ``block_size`` buffers (one spared for output)
    that fit into the budget.
    """
    stats = stats if stats is not None else IOStats()
    runs = partition_into_runs(chunks, dtype, memory_budget, stats, tmpdir, spill_single=False)
    buffer_size = max(block_size, dtype.itemsize)
    fan_in = max(2, memory_budget // buffer_size - 1)
    n_runs = 1 if runs.in_memory is not None else len(runs.paths)
    levels = 0
    if n_runs > fan_in:
        k = n_runs
        while k > fan_in:
            k = -(-k // fan_in)
            levels += 1
    records = merge_runs(runs, out_path, stats, buffer_size=buffer_size, fan_in=fan_in)
    return SortReport(records, n_runs, levels, dtype.itemsize, memory_budget, fan_in, stats)
