"""Read access to built tree and trie index files."""

from __future__ import annotations

import hashlib
import os
import struct
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfigError, FormatError, IntegrityError, RAW_DTYPE
from .extsort import CountingReader, IOStats
from .storage import (
    HEADER_SIZE,
    KIND_TREE,
    KIND_TRIE,
    LEAF_HEADER,
    NO_LEAF,
    PAGE_SIZE,
    IndexHeader,
    directory_dtype,
    index_record_dtype,
    summary_dtype,
)
from .summarization import cell_bounds, invert_sum, restore_sum
from .tree import descend
from .trie import NODE_INTERNAL, NODE_RECORD

__all__ = ["IndexRecord", "SeriesIndex", "open_index"]


@dataclass(frozen=True)
class IndexRecord:
    """One leaf entry: sortable key, raw-file byte offset, and its position in key order."""

    key: bytes
    offset: int
    position: int
    payload: np.ndarray | None = None


@dataclass
class _TrieNode:
    kind: int
    prefix_len: int
    prefix: int
    first_leaf: int
    last_leaf: int
    masks: list[tuple[int, int]]
    children: list[int]
    child_prefixes: list[int] | None = None


class SeriesIndex:
    """An opened index file (tree or trie, materialized or not).

    Non-materialized indexes need ``raw_path`` to fetch series. All reads are
    counted in ``stats`` (index file) and ``raw_stats`` (raw file).
    """

    def __init__(self, path, raw_path=None, trace: bool = False):
        self.path = Path(path)
        self.stats = IOStats()
        self.raw_stats = IOStats()
        self._reader = CountingReader(self.path, self.stats, trace=trace)
        try:
            self._open(raw_path, trace)
        except BaseException:
            self._reader.close()
            raise

    def _open(self, raw_path, trace):
        size = os.path.getsize(self.path)
        self.header = hdr = IndexHeader.unpack(self._reader.pread(0, HEADER_SIZE))
        end = hdr.node_offset + hdr.node_length
        if end > size or hdr.summary_offset + hdr.summary_length > hdr.leaf_offset:
            raise FormatError("index regions exceed the file")
        if hdr.kind not in (KIND_TREE, KIND_TRIE):
            raise FormatError(f"unknown index kind {hdr.kind}")
        self.config = hdr.config()
        self.materialized = bool(hdr.materialized)
        self.record_dtype = index_record_dtype(self.config, self.materialized)
        if self.record_dtype.itemsize != hdr.record_size:
            raise FormatError("record size in header does not match its configuration")
        if hdr.summary_length != hdr.record_count * summary_dtype(hdr.key_bytes).itemsize:
            raise FormatError("summary array length does not match record count")
        ddt = directory_dtype(hdr.key_bytes)
        raw_dir = self._reader.pread(hdr.directory_offset, hdr.directory_length)
        if len(raw_dir) != hdr.leaf_count * ddt.itemsize:
            raise FormatError("leaf directory length does not match leaf count")
        self.directory = np.frombuffer(raw_dir, dtype=ddt)
        if int(self.directory["count"].sum()) != hdr.record_count:
            raise IntegrityError("leaf entry counts do not add up to the record count")
        self._first_positions = self.directory["first_position"].astype(np.int64)
        self._first_keys = [bytes(k) for k in self.directory["first_key"]]
        self._pages: dict[int, bytes] = {}
        self._trie_nodes: dict[int, _TrieNode] = {}
        self._summaries = None
        self.raw_path = None
        self._raw = None
        if raw_path is not None:
            self.attach_raw(raw_path, trace)

    # -- basic properties -------------------------------------------------

    @property
    def kind(self) -> str:
        return "tree" if self.header.kind == KIND_TREE else "trie"

    @property
    def leaf_count(self) -> int:
        return self.header.leaf_count

    @property
    def depth(self) -> int:
        return self.header.depth

    def __len__(self) -> int:
        return self.header.record_count

    def leaf_counts(self) -> np.ndarray:
        return self.directory["count"].astype(np.int64)

    def close(self) -> None:
        self._reader.close()
        if self._raw is not None:
            self._raw.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- raw file -----------------------------------------------------------

    def attach_raw(self, raw_path, trace: bool = False) -> None:
        size = os.path.getsize(raw_path)
        if size != self.header.raw_size:
            raise IntegrityError(
                f"raw file {raw_path} has {size} bytes, index was built over {self.header.raw_size}"
            )
        self.raw_path = Path(raw_path)
        self._raw = CountingReader(raw_path, self.raw_stats, trace=trace)

    def verify_raw(self) -> None:
        """Hash the attached raw file and compare with the header digest."""
        if self.raw_path is None:
            raise ConfigError("no raw file attached")
        h = hashlib.sha256()
        with open(self.raw_path, "rb") as fh:
            for block in iter(lambda: fh.read(1 << 20), b""):
                h.update(block)
        if h.digest() != self.header.raw_sha256:
            raise IntegrityError("raw file content does not match the index (hash mismatch)")

    # -- leaves -----------------------------------------------------------

    def read_leaf(self, leaf: int) -> np.ndarray:
        """Entries of one leaf as a structured array (see ``record_dtype``)."""
        if not 0 <= leaf < self.leaf_count:
            raise IndexError(f"leaf {leaf} out of range")
        entry = self.directory[leaf]
        count = int(entry["count"])
        data = self._reader.pread(int(entry["block_offset"]), LEAF_HEADER.size + count * self.header.record_size)
        stored, _, next_leaf = LEAF_HEADER.unpack_from(data)
        if stored != count:
            raise IntegrityError(f"leaf {leaf} header count {stored} != directory count {count}")
        expected_next = NO_LEAF if leaf == self.leaf_count - 1 else leaf + 1
        if next_leaf != expected_next:
            raise IntegrityError(f"leaf {leaf} links to {next_leaf}, expected {expected_next}")
        return np.frombuffer(data, dtype=self.record_dtype, offset=LEAF_HEADER.size, count=count)

    def next_leaf(self, leaf: int) -> int:
        data = self._reader.pread(int(self.directory[leaf]["block_offset"]), LEAF_HEADER.size)
        return LEAF_HEADER.unpack(data)[2]

    def iter_leaves(self):
        """Yield every leaf in key order by following the next-leaf links."""
        leaf = 0 if self.leaf_count else NO_LEAF
        while leaf != NO_LEAF:
            yield leaf, self.read_leaf(leaf)
            leaf = self.next_leaf(leaf) if leaf + 1 < self.leaf_count else NO_LEAF

    def leaf_scan(self, start: int, radius: int) -> tuple[np.ndarray, np.ndarray, int]:
        """Entries of leaves ``start - radius .. start + radius`` (clipped).

        Returns ``(records, positions, leaves read)``.
        """
        if radius < 0:
            raise ConfigError("radius must be >= 0")
        lo = max(0, start - radius)
        hi = min(self.leaf_count - 1, start + radius)
        parts, positions = [], []
        for leaf in range(lo, hi + 1):
            recs = self.read_leaf(leaf)
            first = int(self._first_positions[leaf])
            parts.append(recs)
            positions.append(np.arange(first, first + len(recs), dtype=np.int64))
        if not parts:
            return np.zeros(0, dtype=self.record_dtype), np.zeros(0, dtype=np.int64), 0
        return np.concatenate(parts), np.concatenate(positions), hi - lo + 1

    def leaf_of_position(self, position: int) -> int:
        return int(np.searchsorted(self._first_positions, position, side="right") - 1)

    # -- lookup -----------------------------------------------------------

    def lookup_leaf(self, key: bytes) -> int:
        """Leaf whose key range holds the insertion point of ``key``."""
        return self.lookup(key)[0]

    def lookup(self, key: bytes) -> tuple[int, int]:
        """``(leaf, nodes visited)`` for ``key``."""
        if len(key) != self.header.key_bytes:
            raise ConfigError(f"key must have {self.header.key_bytes} bytes")
        if self.leaf_count == 0:
            raise IndexError("index has no leaves")
        if self.header.kind == KIND_TREE:
            return descend(
                self._read_page,
                self.header.root,
                self.header.depth,
                key,
                self.header.key_bytes,
                self.leaf_count,
                self.header.node_count,
            )
        return self._trie_lookup(key)

    def _read_page(self, page_id: int) -> bytes:
        page = self._pages.get(page_id)
        if page is None:
            page = self._reader.pread(self.header.node_offset + page_id * PAGE_SIZE, PAGE_SIZE)
            if len(page) != PAGE_SIZE:
                raise IntegrityError(f"node page {page_id} truncated")
            self._pages[page_id] = page
        return page

    def _trie_node(self, node_id: int) -> _TrieNode:
        node = self._trie_nodes.get(node_id)
        if node is not None:
            return node
        hdr = self.header
        if not 0 <= node_id < hdr.node_count:
            raise IntegrityError(f"trie node {node_id} out of range")
        (rel,) = struct.unpack("<Q", self._reader.pread(hdr.node_offset + 8 * node_id, 8))
        w = hdr.segment_count
        head = self._reader.pread(hdr.node_offset + rel, NODE_RECORD.size + 2 * w + 4)
        kind, _, prefix_len, first_leaf, last_leaf = NODE_RECORD.unpack_from(head)
        raw_masks = head[NODE_RECORD.size : NODE_RECORD.size + 2 * w]
        masks = [(raw_masks[2 * j], raw_masks[2 * j + 1]) for j in range(w)]
        children: list[int] = []
        if kind == NODE_INTERNAL:
            (n_children,) = struct.unpack_from("<I", head, NODE_RECORD.size + 2 * w)
            start = hdr.node_offset + rel + NODE_RECORD.size + 2 * w + 4
            children = np.frombuffer(self._reader.pread(start, 4 * n_children), dtype="<u4").tolist()
        b = hdr.bits_per_segment
        codes = np.array([(v << (b - length)) if length else 0 for length, v in masks], dtype=np.uint8)
        prefix = int.from_bytes(invert_sum(codes, b), "big")
        node = _TrieNode(kind, prefix_len, prefix, first_leaf, last_leaf, masks, children)
        self._trie_nodes[node_id] = node
        return node

    def _trie_lookup(self, key: bytes) -> tuple[int, int]:
        total_bits = 8 * self.header.key_bytes
        k = int.from_bytes(key, "big")
        node = self._trie_node(0)
        visited = 1
        while node.kind == NODE_INTERNAL and node.children:
            if node.child_prefixes is None:
                node.child_prefixes = [self._trie_node(c).prefix for c in node.children]
            i = bisect_right(node.child_prefixes, k) - 1
            child = self._trie_node(node.children[i]) if i >= 0 else None
            if child is None or (k ^ child.prefix) >> (total_bits - child.prefix_len) != 0:
                return self._insertion_leaf(key, node.first_leaf, node.last_leaf), visited
            node = child
            visited += 1
        if node.kind == NODE_INTERNAL:
            return self._insertion_leaf(key, node.first_leaf, node.last_leaf), visited
        return node.first_leaf, visited

    def _insertion_leaf(self, key: bytes, lo: int = 0, hi: int | None = None) -> int:
        hi = self.leaf_count - 1 if hi is None else hi
        leaf = bisect_right(self._first_keys, key) - 1
        return min(max(leaf, lo), hi)

    # -- summaries and series ---------------------------------------------

    def summaries(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted ``(keys, offsets)`` arrays of the whole index, loaded once."""
        if self._summaries is None:
            hdr = self.header
            data = self._reader.pread(hdr.summary_offset, hdr.summary_length)
            arr = np.frombuffer(data, dtype=summary_dtype(hdr.key_bytes))
            self._summaries = (arr["key"], arr["offset"].astype(np.int64))
        return self._summaries

    def summary_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-record region bounds of the restored SAX words, cached."""
        cached = getattr(self, "_bounds", None)
        if cached is None:
            keys, _ = self.summaries()
            words = restore_sum(keys, self.config.segment_count, self.config.bits_per_segment)
            cached = self._bounds = cell_bounds(words, self.config.bits_per_segment)
        return cached

    def record(self, position: int) -> IndexRecord:
        keys, offsets = self.summaries()
        return IndexRecord(keys[position].tobytes(), int(offsets[position]), int(position))

    def fetch_series(self, record: IndexRecord | int) -> np.ndarray:
        """Raw series of a record (float64), from the leaf or from the raw file."""
        if not isinstance(record, IndexRecord):
            record = self.record(int(record))
        if record.payload is not None:
            return np.asarray(record.payload, dtype=np.float64)
        if self.materialized:
            return self._fetch_materialized(record.position)
        return self.fetch_raw(record.offset)

    def fetch_raw(self, offset: int) -> np.ndarray:
        if self._raw is None:
            raise ConfigError("non-materialized index needs the raw file (raw_path)")
        nbytes = RAW_DTYPE.itemsize * self.config.series_len
        if offset < 0 or offset % nbytes or offset + nbytes > self.header.raw_size:
            raise IntegrityError(f"offset {offset} is outside the raw file")
        data = self._raw.pread(offset, nbytes)
        if len(data) != nbytes:
            raise IntegrityError(f"short read at raw offset {offset}; stale raw file?")
        return np.frombuffer(data, dtype=RAW_DTYPE).astype(np.float64)

    def _fetch_materialized(self, position: int) -> np.ndarray:
        if not 0 <= position < len(self):
            raise IntegrityError(f"position {position} out of range")
        leaf = self.leaf_of_position(position)
        entry = self.directory[leaf]
        within = position - int(entry["first_position"])
        base = int(entry["block_offset"]) + LEAF_HEADER.size + within * self.header.record_size
        payload_at = base + self.header.key_bytes + 8
        data = self._reader.pread(payload_at, RAW_DTYPE.itemsize * self.config.series_len)
        return np.frombuffer(data, dtype=RAW_DTYPE).astype(np.float64)


def open_index(path, raw_path=None, trace: bool = False) -> SeriesIndex:
    return SeriesIndex(path, raw_path, trace)
