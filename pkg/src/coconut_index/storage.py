"""On-disk index container shared by the balanced tree and the prefix trie.

Layout (all integers little-endian, see FORMAT.md)::

    header (256 B) | summary array | leaf region | leaf directory | node region

The summary array holds every ``(key, offset)`` pair in sorted order; the leaf
region holds the same records (plus the raw series when materialized) packed
into leaf blocks, in the same order. The node region is 4 KiB aligned.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import EngineConfig, FormatError, count_series, series_bytes, RAW_DTYPE
from .extsort import CountingReader, CountingWriter, IOStats, record_dtype
from .summarization import invert_sum, sax

MAGIC = b"CCNTIDX\x00"
FORMAT_VERSION = 1
HEADER_SIZE = 256
PAGE_SIZE = 4096
KIND_TREE = 0
KIND_TRIE = 1
NO_LEAF = -1

_HEADER = struct.Struct("<8sIBBHIIIIdQIIQQQQQQQQQIIQQ32s")
LEAF_HEADER = struct.Struct("<IIq")


@dataclass
class IndexHeader:
    magic: bytes
    version: int
    kind: int
    materialized: int
    reserved: int
    series_len: int
    segment_count: int
    bits_per_segment: int
    leaf_capacity: int
    fill_factor: float
    record_count: int
    key_bytes: int
    record_size: int
    summary_offset: int
    summary_length: int
    leaf_offset: int
    leaf_length: int
    directory_offset: int
    directory_length: int
    node_offset: int
    node_length: int
    leaf_count: int
    depth: int
    node_count: int
    root: int
    raw_size: int
    raw_sha256: bytes

    def pack(self) -> bytes:
        raw = _HEADER.pack(*(getattr(self, f.name) for f in fields(self)))
        return raw.ljust(HEADER_SIZE, b"\x00")

    @classmethod
    def unpack(cls, data: bytes) -> "IndexHeader":
        if len(data) < HEADER_SIZE:
            raise FormatError("index file is shorter than its header")
        hdr = cls(*_HEADER.unpack_from(data))
        if hdr.magic != MAGIC:
            raise FormatError("not an index file (bad magic)")
        if hdr.version != FORMAT_VERSION:
            raise FormatError(f"unsupported index format version {hdr.version}")
        return hdr

    def config(self, **overrides) -> EngineConfig:
        return EngineConfig(
            series_len=self.series_len,
            segment_count=self.segment_count,
            bits_per_segment=self.bits_per_segment,
            leaf_capacity=self.leaf_capacity,
            fill_factor=self.fill_factor,
            **overrides,
        )


def directory_dtype(key_len: int) -> np.dtype:
    return np.dtype(
        [
            ("block_offset", "<u8"),
            ("first_position", "<u8"),
            ("count", "<u4"),
            ("reserved", "<u4"),
            ("first_key", "u1", (key_len,)),
        ]
    )


def summary_dtype(key_len: int) -> np.dtype:
    return record_dtype(key_len)


def index_record_dtype(config: EngineConfig, materialized: bool) -> np.dtype:
    return record_dtype(config.key_bytes, config.series_len if materialized else None)


def align(value: int, to: int = PAGE_SIZE) -> int:
    return -(-value // to) * to


def summarize_raw(
    raw_path,
    config: EngineConfig,
    materialized: bool,
    stats: IOStats,
    hasher=None,
    chunk_bytes: int = 1 << 22,
) -> Iterator[np.ndarray]:
    """One sequential pass over a raw file yielding chunks of unsorted index records."""
    n = config.series_len
    rec = series_bytes(n)
    total = count_series(raw_path, n)
    dtype = index_record_dtype(config, materialized)
    rows_per_chunk = max(1, min(chunk_bytes, config.memory_budget) // rec)
    with CountingReader(raw_path, stats) as reader:
        done = 0
        while done < total:
            rows = min(rows_per_chunk, total - done)
            data = reader.pread(done * rec, rows * rec)
            if hasher is not None:
                hasher.update(data)
            values = np.frombuffer(data, dtype=RAW_DTYPE).reshape(rows, n)
            out = np.empty(rows, dtype=dtype)
            words = sax(values.astype(np.float64), config.segment_count, config.bits_per_segment)
            out["key"] = invert_sum(words, config.bits_per_segment)
            out["offset"] = (np.arange(done, done + rows, dtype=np.uint64)) * np.uint64(rec)
            if materialized:
                out["payload"] = values
            yield out
            done += rows


def iter_sorted(path, dtype: np.dtype, stats: IOStats, chunk_records: int = 1 << 14) -> Iterator[np.ndarray]:
    """Stream a sorted record file in chunks."""
    size = dtype.itemsize
    with CountingReader(path, stats) as reader:
        offset = 0
        while True:
            data = reader.pread(offset, chunk_records * size)
            if not data:
                return
            if len(data) % size:
                raise FormatError(f"{path}: truncated record file")
            offset += len(data)
            yield np.frombuffer(data, dtype=dtype)


class RegionWriter:
    """Buffered writer for one region of a file opened elsewhere."""

    def __init__(self, fh, start: int, stats: IOStats, buffer_size: int = 1 << 16):
        self._fh = fh
        self.pos = start
        self._buf = bytearray()
        self._flushed = start
        self._limit = buffer_size
        self.stats = stats

    def write(self, data) -> None:
        self._buf += data
        self.pos += len(data)
        if len(self._buf) >= self._limit:
            self.flush()

    def flush(self) -> None:
        if self._buf:
            self._fh.seek(self._flushed)
            self._fh.write(self._buf)
            self.stats.writes += 1
            self.stats.bytes_written += len(self._buf)
            self._flushed += len(self._buf)
            self._buf = bytearray()


class LeafWriter:
    """Appends leaf blocks and collects their directory entries."""

    def __init__(self, fh, start: int, dtype: np.dtype, stats: IOStats):
        self.region = RegionWriter(fh, start, stats)
        self.start = start
        self.dtype = dtype
        self.key_len = dtype["key"].shape[0]
        self.entries: list[tuple[int, int, int, bytes]] = []
        self.position = 0

    def add(self, records: np.ndarray, last: bool) -> int:
        index = len(self.entries)
        next_leaf = NO_LEAF if last else index + 1
        block_offset = self.region.pos
        self.region.write(LEAF_HEADER.pack(len(records), 0, next_leaf))
        self.region.write(np.ascontiguousarray(records).tobytes())
        first_key = records["key"][0].tobytes() if len(records) else bytes(self.key_len)
        self.entries.append((block_offset, self.position, len(records), first_key))
        self.position += len(records)
        return index

    def directory(self) -> np.ndarray:
        d = np.zeros(len(self.entries), dtype=directory_dtype(self.key_len))
        if self.entries:
            offs, firsts, counts, keys = zip(*self.entries)
            d["block_offset"] = offs
            d["first_position"] = firsts
            d["count"] = counts
            d["first_key"] = np.frombuffer(b"".join(keys), dtype=np.uint8).reshape(-1, self.key_len)
        return d

    def close_chain(self) -> None:
        """Terminate the next-leaf chain at the last written leaf."""
        self.region.flush()
        if self.entries:
            off, _, count, _ = self.entries[-1]
            fix = RegionWriter(self.region._fh, off, self.region.stats)
            fix.write(LEAF_HEADER.pack(count, 0, NO_LEAF))
            fix.flush()

    @property
    def length(self) -> int:
        return self.region.pos - self.start


def file_sha256(path) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.digest()


def new_header(config: EngineConfig, kind: int, materialized: bool, records: int) -> IndexHeader:
    dtype = index_record_dtype(config, materialized)
    return IndexHeader(
        magic=MAGIC,
        version=FORMAT_VERSION,
        kind=kind,
        materialized=int(materialized),
        reserved=0,
        series_len=config.series_len,
        segment_count=config.segment_count,
        bits_per_segment=config.bits_per_segment,
        leaf_capacity=config.leaf_capacity,
        fill_factor=float(config.fill_factor),
        record_count=records,
        key_bytes=config.key_bytes,
        record_size=dtype.itemsize,
        summary_offset=HEADER_SIZE,
        summary_length=records * summary_dtype(config.key_bytes).itemsize,
        leaf_offset=0,
        leaf_length=0,
        directory_offset=0,
        directory_length=0,
        node_offset=0,
        node_length=0,
        leaf_count=0,
        depth=0,
        node_count=0,
        root=0,
        raw_size=0,
        raw_sha256=bytes(32),
    )


def finish_file(fh, header: IndexHeader, directory: np.ndarray, nodes: bytes, stats: IOStats) -> None:
    """Write directory, node region and the final header of an index file."""
    header.directory_offset = header.leaf_offset + header.leaf_length
    header.directory_length = directory.nbytes
    header.node_offset = align(header.directory_offset + header.directory_length)
    header.node_length = len(nodes)
    tail = RegionWriter(fh, header.directory_offset, stats)
    tail.write(directory.tobytes())
    tail.write(bytes(header.node_offset - tail.pos))
    tail.write(nodes)
    tail.flush()
    fh.seek(0)
    fh.write(header.pack())
    stats.writes += 1
    stats.bytes_written += HEADER_SIZE
    fh.truncate(header.node_offset + header.node_length)


@dataclass
class SortedInput:
    """Result of the summarize + external sort phase of a build."""

    path: Path
    workdir: Path
    dtype: np.dtype
    records: int
    raw_size: int
    raw_sha256: bytes
    raw_stats: IOStats
    sort_stats: IOStats
    sort_report: object

    def cleanup(self) -> None:
        import shutil

        shutil.rmtree(self.workdir, ignore_errors=True)


def sort_raw_records(raw_path, config: EngineConfig, materialized: bool, tmpdir=None) -> SortedInput:
    """Summarize every series of ``raw_path`` and external-sort the records by key."""
    import os
    import tempfile

    from .extsort import external_sort, temp_root

    records = count_series(raw_path, config.series_len)
    raw_stats, sort_stats = IOStats(), IOStats()
    hasher = hashlib.sha256()
    dtype = index_record_dtype(config, materialized)
    workdir = Path(tempfile.mkdtemp(prefix="coconut-build-", dir=temp_root(tmpdir)))
    out = workdir / "sorted.bin"
    try:
        report = external_sort(
            summarize_raw(raw_path, config, materialized, raw_stats, hasher),
            dtype,
            out,
            memory_budget=config.memory_budget,
            block_size=config.block_size,
            stats=sort_stats,
            tmpdir=workdir,
        )
    except BaseException:
        import shutil

        shutil.rmtree(workdir, ignore_errors=True)
        raise
    return SortedInput(
        out, workdir, dtype, records, os.path.getsize(raw_path), hasher.digest(), raw_stats, sort_stats, report
    )


@dataclass
class BuildReport:
    """Statistics of one index build; serializable with :meth:`to_dict`."""

    kind: str
    materialized: bool
    config: dict
    records: int
    leaf_count: int
    depth: int
    node_count: int
    mean_utilization: float
    utilization_excluding_last: float
    min_leaf: int
    max_leaf: int
    wall_time: float
    raw_bytes: int
    raw_stats: IOStats
    sort_stats: IOStats
    sort_runs: int
    sort_merge_levels: int
    sort_record_bytes: int
    index_stats: IOStats
    index_bytes: int

    @property
    def raw_read_ratio(self) -> float:
        return self.raw_stats.bytes_read / self.raw_bytes if self.raw_bytes else 0.0

    @property
    def sort_read_passes(self) -> float:
        return self.sort_stats.bytes_read / self.sort_record_bytes if self.sort_record_bytes else 0.0

    @property
    def sort_write_passes(self) -> float:
        return self.sort_stats.bytes_written / self.sort_record_bytes if self.sort_record_bytes else 0.0

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = v.to_dict() if isinstance(v, IOStats) else v
        d["raw_read_ratio"] = self.raw_read_ratio
        d["sort_read_passes"] = self.sort_read_passes
        d["sort_write_passes"] = self.sort_write_passes
        d["sort_passes"] = self.sort_read_passes + self.sort_write_passes
        return d


def leaf_utilization(counts, capacity: int) -> tuple[float, float]:
    """Mean fill of all leaves, and of all leaves but the last."""
    c = np.minimum(np.asarray(counts, dtype=np.float64), capacity) / capacity
    if not len(c):
        return 0.0, 0.0
    rest = c[:-1] if len(c) > 1 else c
    return float(c.mean()), float(rest.mean())
