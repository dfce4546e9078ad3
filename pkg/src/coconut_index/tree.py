"""Bulk loading of the balanced Coconut-Tree.

The sorted record stream is cut into leaves of ``ceil(fill_factor *
leaf_capacity)`` entries, written back to back; internal levels are then built
bottom-up from the first key of every child, one 4 KiB page per node, until a
single root remains. Separators are the first keys of the right children, so a
lookup follows the last child whose first key is ``<=`` the probe.
"""

from __future__ import annotations

import struct
import time
from bisect import bisect_right

import numpy as np

from .core import EngineConfig, IntegrityError
from .extsort import IOStats
from .storage import (
    HEADER_SIZE,
    KIND_TREE,
    PAGE_SIZE,
    BuildReport,
    LeafWriter,
    RegionWriter,
    finish_file,
    iter_sorted,
    leaf_utilization,
    new_header,
    sort_raw_records,
)

__all__ = ["build_tree", "node_fanout", "build_internal_levels", "decode_page", "descend"]

NODE_HEADER = struct.Struct("<BBHIQ")


def node_fanout(key_len: int) -> int:
    return (PAGE_SIZE - NODE_HEADER.size) // (key_len + 8)


def encode_page(level: int, children, separators, key_len: int) -> bytes:
    body = np.asarray(children, dtype="<u8").tobytes() + b"".join(separators)
    page = NODE_HEADER.pack(level, 0, len(children), 0, 0) + body
    if len(page) > PAGE_SIZE:
        raise ValueError("node page overflow")
    return page.ljust(PAGE_SIZE, b"\x00")


def decode_page(page: bytes, key_len: int) -> tuple[int, list[int], list[bytes]]:
    level, _, count, _, _ = NODE_HEADER.unpack_from(page)
    if count == 0 or NODE_HEADER.size + count * 8 + (count - 1) * key_len > len(page):
        raise IntegrityError(f"malformed node page (children={count})")
    start = NODE_HEADER.size
    children = np.frombuffer(page, dtype="<u8", count=count, offset=start).tolist()
    start += count * 8
    seps = [page[start + i * key_len : start + (i + 1) * key_len] for i in range(count - 1)]
    return level, children, seps


def build_internal_levels(first_keys: list[bytes], key_len: int) -> tuple[bytes, int, int, int]:
    """Pages for all internal levels over leaves with the given first keys.

    Returns ``(pages, depth, root, node_count)``; with at most one leaf there
    are no internal nodes and the root is leaf 0.
    """
    if len(first_keys) <= 1:
        return b"", 0, 0, 0
    fanout = node_fanout(key_len)
    pages: list[bytes] = []
    children = list(range(len(first_keys)))
    keys = list(first_keys)
    level = 1
    while True:
        groups = -(-len(children) // fanout)
        bounds = np.linspace(0, len(children), groups + 1).round().astype(int)
        next_children, next_keys = [], []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            pages.append(encode_page(level, children[lo:hi], keys[lo + 1 : hi], key_len))
            next_children.append(len(pages) - 1)
            next_keys.append(keys[lo])
        if len(next_children) == 1:
            return b"".join(pages), level, next_children[0], len(pages)
        children, keys = next_children, next_keys
        level += 1


def descend(read_page, root: int, depth: int, key: bytes, key_len: int, leaf_count: int, node_count: int) -> tuple[int, int]:
    """Walk from the root to the leaf whose range holds ``key``.

    Returns ``(leaf index, nodes visited)``. Raises IntegrityError when a page
    has the wrong level, unsorted separators, or separators outside the range
    its parent assigned to it.
    """
    if depth == 0:
        return 0, 0
    page_id, expected = root, depth
    lo, hi = None, None
    for visited in range(1, depth + 1):
        if not 0 <= page_id < node_count:
            raise IntegrityError(f"child reference {page_id} outside node region")
        level, children, seps = decode_page(read_page(page_id), key_len)
        if level != expected:
            raise IntegrityError(f"node {page_id} has level {level}, expected {expected}")
        for a, b in zip(seps, seps[1:]):
            if a > b:
                raise IntegrityError(f"node {page_id} separators out of order")
        if seps and ((lo is not None and seps[0] < lo) or (hi is not None and seps[-1] > hi)):
            raise IntegrityError(f"node {page_id} separators outside parent range")
        i = bisect_right(seps, key)
        if i > 0:
            lo = seps[i - 1]
        if i < len(seps):
            hi = seps[i]
        child = children[i]
        if level == 1:
            if not 0 <= child < leaf_count:
                raise IntegrityError(f"leaf reference {child} out of range")
            return child, visited
        page_id, expected = child, expected - 1
    raise IntegrityError("tree deeper than recorded depth")


def build_tree(raw_path, out_path, config: EngineConfig | None = None, materialized: bool = False, tmpdir=None) -> BuildReport:
    """Bulk-load a Coconut-Tree over ``raw_path`` into ``out_path``.

    With ``materialized=True`` every leaf entry carries its raw series
    (Coconut-Tree-Full); otherwise entries only point into the raw file.
    """
    config = config or EngineConfig()
    started = time.perf_counter()
    sorted_in = sort_raw_records(raw_path, config, materialized, tmpdir)
    try:
        total = sorted_in.records
        per_leaf = config.leaf_fill
        leaf_count = -(-total // per_leaf)
        header = new_header(config, KIND_TREE, materialized, total)
        header.raw_size = sorted_in.raw_size
        header.raw_sha256 = sorted_in.raw_sha256
        header.leaf_offset = HEADER_SIZE + header.summary_length
        index_stats = IOStats()
        key_len = config.key_bytes
        with open(out_path, "w+b") as fh:
            summary = RegionWriter(fh, HEADER_SIZE, index_stats)
            leaves = LeafWriter(fh, header.leaf_offset, sorted_in.dtype, index_stats)
            pending: list[np.ndarray] = []
            filled = 0
            for chunk in iter_sorted(sorted_in.path, sorted_in.dtype, sorted_in.sort_stats):
                if materialized:
                    summary.write(_summary_bytes(chunk, key_len))
                else:
                    summary.write(chunk.tobytes())
                start = 0
                while start < len(chunk):
                    take = min(per_leaf - filled, len(chunk) - start)
                    pending.append(chunk[start : start + take])
                    filled += take
                    start += take
                    if filled == per_leaf:
                        leaves.add(np.concatenate(pending), last=len(leaves.entries) == leaf_count - 1)
                        pending, filled = [], 0
            if pending:
                leaves.add(np.concatenate(pending), last=True)
            summary.flush()
            leaves.region.flush()
            header.leaf_length = leaves.length
            header.leaf_count = len(leaves.entries)
            first_keys = [e[3] for e in leaves.entries]
            pages, depth, root, node_count = build_internal_levels(first_keys, key_len)
            header.depth, header.root, header.node_count = depth, root, node_count
            finish_file(fh, header, leaves.directory(), pages, index_stats)
        counts = [e[2] for e in leaves.entries]
    finally:
        sorted_in.cleanup()
    mean_util, rest_util = leaf_utilization(counts, config.leaf_capacity)
    return BuildReport(
        kind="tree",
        materialized=materialized,
        config=config.to_dict(),
        records=total,
        leaf_count=len(counts),
        depth=depth,
        node_count=node_count,
        mean_utilization=mean_util,
        utilization_excluding_last=rest_util,
        min_leaf=min(counts, default=0),
        max_leaf=max(counts, default=0),
        wall_time=time.perf_counter() - started,
        raw_bytes=sorted_in.raw_size,
        raw_stats=sorted_in.raw_stats,
        sort_stats=sorted_in.sort_stats,
        sort_runs=sorted_in.sort_report.runs,
        sort_merge_levels=sorted_in.sort_report.merge_levels,
        sort_record_bytes=total * sorted_in.dtype.itemsize,
        index_stats=index_stats,
        index_bytes=header.node_offset + header.node_length,
    )


def _summary_bytes(chunk: np.ndarray, key_len: int) -> bytes:
    from .storage import summary_dtype

    out = np.empty(len(chunk), dtype=summary_dtype(key_len))
    out["key"] = chunk["key"]
    out["offset"] = chunk["offset"]
    return out.tobytes()
