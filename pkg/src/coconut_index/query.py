"""Approximate radius search, exact skip-sequential search, and the brute-force oracle."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .core import ConfigError, CoconutError, RAW_DTYPE, count_series, series_bytes
from .extsort import CountingReader, IOStats
from .index import SeriesIndex
from .summarization import invert_sum, mindist_paa, paa, sax

__all__ = [
    "EmptyIndexError",
    "QueryResult",
    "approx_search",
    "exact_search",
    "brute_force_nn",
    "compute_mindists",
]


class EmptyIndexError(CoconutError):
    """The index holds no series, so there is no nearest neighbor."""


@dataclass
class QueryResult:
    distance: float
    offset: int
    position: int = -1
    leaves_visited: int = 0
    nodes_visited: int = 0
    series_fetched: int = 0
    summaries_scanned: int = 0
    bytes_read: int = 0
    seconds: float = 0.0
    pruning_violations: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _query_array(index: SeriesIndex, q) -> np.ndarray:
    arr = np.asarray(q, dtype=np.float64)
    if arr.shape != (index.config.series_len,):
        raise ConfigError(f"query must have {index.config.series_len} points, got shape {arr.shape}")
    return arr


def _io_bytes(index: SeriesIndex) -> int:
    return index.stats.bytes_read + index.raw_stats.bytes_read


def _distances(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    diff = rows - q
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def approx_search(index: SeriesIndex, q, radius: int = 1) -> QueryResult:
    """Best match among the leaves within ``radius`` of the query's insertion leaf."""
    started = time.perf_counter()
    q = _query_array(index, q)
    if len(index) == 0:
        raise EmptyIndexError("approximate search on an empty index")
    before = _io_bytes(index)
    cfg = index.config
    key = invert_sum(sax(q, cfg.segment_count, cfg.bits_per_segment), cfg.bits_per_segment)
    leaf, visited = index.lookup(key)
    records, positions, leaves = index.leaf_scan(leaf, radius)
    if index.materialized:
        rows = records["payload"].astype(np.float64)
    else:
        rows = np.stack([index.fetch_raw(int(o)) for o in records["offset"]])
    dists = _distances(rows, q)
    best = float(dists.min())
    # ties: lowest raw offset
    tied = np.flatnonzero(dists == best)
    pick = tied[np.argmin(records["offset"][tied])]
    return QueryResult(
        distance=best,
        offset=int(records["offset"][pick]),
        position=int(positions[pick]),
        leaves_visited=leaves,
        nodes_visited=visited,
        series_fetched=len(records),
        bytes_read=_io_bytes(index) - before,
        seconds=time.perf_counter() - started,
    )


def compute_mindists(index: SeriesIndex, q, workers: int = 1) -> np.ndarray:
    """Lower bound of every indexed record against ``q``, in key order.

    With ``workers > 1`` the array is split into contiguous chunks computed in
    threads; the result is identical to the sequential one.
    """
    q = _query_array(index, q)
    lower, upper = index.summary_bounds()
    qp = paa(q, index.config.segment_count)
    n = index.config.series_len
    if workers <= 1 or len(lower) < 2 * workers:
        return mindist_paa(qp, lower, upper, n)
    out = np.empty(len(lower), dtype=np.float64)
    bounds = np.linspace(0, len(lower), workers + 1).astype(int)

    def work(span):
        lo, hi = span
        out[lo:hi] = mindist_paa(qp, lower[lo:hi], upper[lo:hi], n)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(work, zip(bounds[:-1], bounds[1:])))
    return out


def exact_search(index: SeriesIndex, q, radius: int = 1, workers: int = 1, audit: bool = False) -> QueryResult:
    """Exact 1-NN: approximate answer first, then a skip-sequential scan of the summaries.

    Records are fetched in key order when their lower bound is strictly below
    the best distance so far. With ``audit=True`` the distances of all skipped
    records are computed afterwards and any that beat the answer are counted
    in ``pruning_violations`` (always 0 for a sound bound).
    """
    started = time.perf_counter()
    q = _query_array(index, q)
    approx = approx_search(index, q, radius)
    before = _io_bytes(index) - approx.bytes_read
    _, offsets = index.summaries()
    md = compute_mindists(index, q, workers)
    bsf, best_offset, best_position = approx.distance, approx.offset, approx.position
    fetched = 0
    fetch = index._fetch_materialized if index.materialized else None
    visited = np.zeros(len(md), dtype=bool) if audit else None
    for pos in np.flatnonzero(md < bsf):
        if md[pos] >= bsf:
            continue
        off = int(offsets[pos])
        row = fetch(int(pos)) if fetch is not None else index.fetch_raw(off)
        fetched += 1
        if visited is not None:
            visited[pos] = True
        diff = row - q
        d = float(np.sqrt(np.dot(diff, diff)))
        if d < bsf or (d == bsf and off < best_offset):
            bsf, best_offset, best_position = d, off, int(pos)
    violations = None
    if audit:
        violations = _audit(index, q, md, visited, bsf)
    return QueryResult(
        distance=bsf,
        offset=best_offset,
        position=best_position,
        leaves_visited=approx.leaves_visited,
        nodes_visited=approx.nodes_visited,
        series_fetched=approx.series_fetched + fetched,
        summaries_scanned=len(md),
        bytes_read=_io_bytes(index) - before,
        seconds=time.perf_counter() - started,
        pruning_violations=violations,
    )


def _audit(index: SeriesIndex, q, md, visited, bsf) -> int:
    skipped = np.flatnonzero(~visited)
    bad = 0
    # separate counters so the audit does not pollute query I/O figures
    saved = index.stats.bytes_read, index.raw_stats.bytes_read
    for start in range(0, len(skipped), 4096):
        part = skipped[start : start + 4096]
        rows = np.stack([index.fetch_series(int(p)) for p in part])
        d = _distances(rows, q)
        bad += int(np.count_nonzero(d < bsf * (1 - 1e-12)))
    index.stats.bytes_read, index.raw_stats.bytes_read = saved
    return bad


def brute_force_nn(raw_path, q, series_len: int | None = None, chunk_rows: int = 8192) -> QueryResult:
    """Exact 1-NN by a full sequential scan; ties go to the lowest offset."""
    started = time.perf_counter()
    q = np.asarray(q, dtype=np.float64)
    n = series_len or q.size
    if q.shape != (n,):
        raise ConfigError(f"query must have {n} points")
    total = count_series(raw_path, n)
    if total == 0:
        raise EmptyIndexError(f"{raw_path} holds no series")
    rec = series_bytes(n)
    stats = IOStats()
    best, best_row = np.inf, -1
    with CountingReader(raw_path, stats) as reader:
        for start in range(0, total, chunk_rows):
            rows = min(chunk_rows, total - start)
            block = np.frombuffer(reader.pread(start * rec, rows * rec), dtype=RAW_DTYPE)
            d = _distances(block.reshape(rows, n).astype(np.float64), q)
            i = int(np.argmin(d))
            if d[i] < best:
                best, best_row = float(d[i]), start + i
    return QueryResult(
        distance=best,
        offset=best_row * rec,
        series_fetched=total,
        bytes_read=stats.bytes_read,
        seconds=time.perf_counter() - started,
    )
