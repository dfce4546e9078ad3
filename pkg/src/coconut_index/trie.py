"""Bottom-up bulk loading of the prefix-split Coconut-Trie.

Nodes are identified by a prefix of the interleaved key: a node with prefix
length ``L`` holds every key whose first ``L`` interleaved bits match. Since
bits are dropped from the end of the interleaved string, this is the same as
wildcarding least-significant bits segment by segment, so every node maps to a
per-segment iSAX-style mask such as ``(0* 0* 1* 1*)``.

Sorted keys are inserted left to right. Every distinct word gets its own leaf;
a new leaf is hooked into the right spine of the trie at the longest prefix it
shares with the previous leaf, creating that parent if needed. As in iSAX, the
root fans out on the first bit of every segment, so no node between the root
and depth ``w`` bits exists. Once all keys of one root child are in, its
subtree is compacted: sibling leaves whose entries fit into one leaf are
merged into their parent, repeatedly, until nothing changes.

Leaves cover contiguous ranges of the sorted record order, so a leaf stores
only ``[first, last)`` positions.
"""

from __future__ import annotations

import struct
import time
from typing import Iterator

import numpy as np

from .core import ContractError, EngineConfig
from .extsort import IOStats
from .storage import (
    HEADER_SIZE,
    KIND_TRIE,
    BuildReport,
    LeafWriter,
    RegionWriter,
    finish_file,
    iter_sorted,
    leaf_utilization,
    new_header,
    sort_raw_records,
    summary_dtype,
)

__all__ = [
    "TrieNode",
    "TrieBuilder",
    "segment_masks",
    "format_masks",
    "build_trie",
    "encode_nodes",
    "NODE_RECORD",
]

NODE_RECORD = struct.Struct("<BBHII")
NODE_INTERNAL = 0
NODE_LEAF = 1


class TrieNode:
    __slots__ = ("prefix_len", "prefix", "children", "parent", "first", "last", "leaf_id")

    def __init__(self, prefix_len: int, prefix: int, first: int = 0, last: int = 0, leaf: bool = True):
        self.prefix_len = prefix_len
        self.prefix = prefix
        self.children: list[TrieNode] | None = None if leaf else []
        self.parent: TrieNode | None = None
        self.first = first
        self.last = last
        self.leaf_id = -1

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def count(self) -> int:
        return self.last - self.first

    def add_child(self, child: "TrieNode") -> None:
        child.parent = self
        self.children.append(child)
        if self.children and len(self.children) == 1:
            self.first = child.first
        self.last = max(self.last, child.last)

    def iter_leaves(self) -> Iterator["TrieNode"]:
        stack = [self]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                yield node
            else:
                stack.extend(reversed(node.children))

    def iter_nodes(self) -> Iterator["TrieNode"]:
        """Preorder traversal."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend(reversed(node.children))

    def __repr__(self):
        kind = "leaf" if self.is_leaf else f"{len(self.children)} children"
        return f"TrieNode(L={self.prefix_len}, [{self.first}, {self.last}), {kind})"


def segment_masks(prefix_len: int, prefix: int, segments: int, bits: int, total_bits: int) -> list[tuple[int, int]]:
    """Per-segment ``(prefix length, prefix bits)`` of an interleaved prefix."""
    masks = []
    for j in range(segments):
        length = 0 if prefix_len <= j else min(bits, (prefix_len - j - 1) // segments + 1)
        value = 0
        for i in range(length):
            bit = (prefix >> (total_bits - 1 - (i * segments + j))) & 1
            value = (value << 1) | bit
        masks.append((length, value))
    return masks


def format_masks(masks, bits: int) -> str:
    """Render masks the iSAX way, e.g. ``(0* 0* 1* 1*)``."""
    parts = []
    for length, value in masks:
        body = format(value, f"0{length}b") if length else ""
        parts.append(body + ("*" if length < bits else ""))
    return "(" + " ".join(parts) + ")"


class TrieBuilder:
    """Incremental bottom-up construction over keys arriving in sorted order."""

    def __init__(self, segments: int, bits: int, leaf_capacity: int):
        self.segments = segments
        self.bits = bits
        self.leaf_capacity = leaf_capacity
        self.word_bits = segments * bits
        self.total_bits = -(-self.word_bits // 8) * 8
        self.root = TrieNode(0, 0, leaf=False)
        self.last_leaf: TrieNode | None = None
        self.last_key: int | None = None
        self.created = 0

    # the prefix of a node with length L keeps the top L bits of the key
    def _truncate(self, key: int, length: int) -> int:
        drop = self.total_bits - length
        return (key >> drop) << drop

    def common_prefix(self, a: int, b: int) -> int:
        return min(self.word_bits, self.total_bits - (a ^ b).bit_length())

    def masks(self, node: TrieNode) -> list[tuple[int, int]]:
        return segment_masks(node.prefix_len, node.prefix, self.segments, self.bits, self.total_bits)

    def insert_bottom_up(self, key: bytes | int, position: int) -> TrieNode:
        """Add one record; keys must arrive sorted and positions consecutively."""
        k = int.from_bytes(key, "big") if isinstance(key, (bytes, bytearray)) else int(key)
        if self.last_key is not None:
            if k < self.last_key:
                raise ContractError("keys must be inserted in sorted order")
            if position != self.last_leaf.last:
                raise ContractError("record positions must be consecutive")
        if k == self.last_key:
            leaf = self.last_leaf
            leaf.last += 1
            node = leaf.parent
            while node is not None:
                node.last = leaf.last
                node = node.parent
            return leaf
        leaf = TrieNode(self.word_bits, k, position, position + 1)
        self.created += 1
        if self.last_leaf is None:
            self.root.add_child(leaf)
            self.root.first = position
        else:
            self.create_up_tree(leaf, self.last_leaf)
        self.last_leaf, self.last_key = leaf, k
        return leaf

    def create_up_tree(self, new: TrieNode, prev: TrieNode) -> TrieNode:
        """Link ``new`` into the trie next to ``prev`` under their longest common prefix.

        Returns the parent ``new`` was attached to.
        """
        common = self.common_prefix(new.prefix, prev.prefix)
        if common >= min(new.prefix_len, prev.prefix_len):
            raise ContractError("create_up_tree needs two distinct masks")
        if common < self.segments:
            parent = self.root
            parent.add_child(new)
            return parent
        # highest ancestor of prev (on the right spine) whose prefix is still longer
        node = prev
        while node.parent is not self.root and node.parent.prefix_len > common:
            node = node.parent
        anchor = node.parent
        if anchor is not self.root and anchor.prefix_len == common:
            anchor.add_child(new)
            self._extend(anchor, new.last)
            return anchor
        parent = TrieNode(common, self._truncate(new.prefix, common), node.first, node.last, leaf=False)
        anchor.children[-1] = parent
        parent.parent = anchor
        parent.children = [node]
        node.parent = parent
        parent.add_child(new)
        self._extend(anchor, new.last)
        self.created += 1
        return parent

    @staticmethod
    def _extend(node: TrieNode, last: int) -> None:
        while node is not None:
            node.last = max(node.last, last)
            node = node.parent

    def compact_subtree(self, top: TrieNode) -> int:
        """Merge sibling leaves into their parent while they fit; returns merge count.

        Children of the root are never merged with each other, the first level
        being fixed by one bit per segment.
        """
        merges = 0
        if top.is_leaf:
            return 0
        while True:
            leaves = list(top.iter_leaves())
            merged = False
            i = 0
            while i < len(leaves) - 1:
                a, b = leaves[i], leaves[i + 1]
                parent = a.parent
                if parent is b.parent and parent is not self.root and a.count + b.count <= self.leaf_capacity:
                    node = self._merge(a, b)
                    leaves[i : i + 2] = [node]
                    merges += 1
                    merged = True
                    continue
                i += 1
            if not merged:
                return merges

    def _merge(self, a: TrieNode, b: TrieNode) -> TrieNode:
        parent = a.parent
        if len(parent.children) == 2:
            # the parent absorbs both entries and becomes a leaf
            parent.children = None
            return parent
        idx = parent.children.index(a)
        common = min(a.prefix_len, b.prefix_len, self.common_prefix(a.prefix, b.prefix))
        node = TrieNode(common, self._truncate(a.prefix, common), a.first, b.last)
        node.parent = parent
        parent.children[idx : idx + 2] = [node]
        return node

    def expected_compaction(self, top: TrieNode) -> list[tuple[int, int]]:
        """Leaf ranges of the compaction fixpoint, computed top-down (test oracle)."""
        out = []

        def visit(node, is_top_level):
            if node.is_leaf or (not is_top_level and node.count <= self.leaf_capacity):
                out.append((node.first, node.last))
                return
            for child in node.children:
                visit(child, False)

        visit(top, top is self.root)
        return out


def encode_nodes(root: TrieNode, builder: TrieBuilder) -> tuple[bytes, int, int]:
    """Serialize the trie; returns ``(node region, node count, depth)``.

    Nodes are numbered in preorder (root = 0). The region starts with one
    ``<u8`` offset per node, relative to the region start.
    """
    nodes = list(root.iter_nodes())
    ids = {id(n): i for i, n in enumerate(nodes)}
    depth = {id(root): 0}
    max_depth = 0
    span: dict[int, tuple[int, int]] = {}
    for node in reversed(nodes):
        if node.is_leaf:
            span[id(node)] = (node.leaf_id, node.leaf_id)
        elif node.children:
            span[id(node)] = (span[id(node.children[0])][0], span[id(node.children[-1])][1])
        else:
            span[id(node)] = (0, 0)
    records = []
    for node in nodes:
        d = depth[id(node)]
        max_depth = max(max_depth, d)
        first_leaf, last_leaf = span[id(node)]
        kind = NODE_LEAF if node.is_leaf else NODE_INTERNAL
        rec = bytearray(NODE_RECORD.pack(kind, 0, node.prefix_len, first_leaf, last_leaf))
        for length, value in builder.masks(node):
            rec += bytes((length, value))
        if not node.is_leaf:
            rec += struct.pack("<I", len(node.children))
            rec += np.asarray([ids[id(c)] for c in node.children], dtype="<u4").tobytes()
            for c in node.children:
                depth[id(c)] = d + 1
        records.append(bytes(rec))
    table_len = 8 * len(records)
    offsets = np.cumsum([0] + [len(r) for r in records[:-1]], dtype=np.uint64) + np.uint64(table_len)
    return offsets.astype("<u8").tobytes() + b"".join(records), len(records), max_depth


def build_trie(raw_path, out_path, config: EngineConfig | None = None, materialized: bool = False, tmpdir=None) -> BuildReport:
    """Bulk-load a Coconut-Trie over ``raw_path`` into ``out_path``."""
    config = config or EngineConfig()
    started = time.perf_counter()
    sorted_in = sort_raw_records(raw_path, config, materialized, tmpdir)
    key_len = config.key_bytes
    builder = TrieBuilder(config.segment_count, config.bits_per_segment, config.leaf_capacity)
    group_shift = builder.total_bits - config.segment_count
    try:
        total = sorted_in.records
        header = new_header(config, KIND_TRIE, materialized, total)
        header.raw_size = sorted_in.raw_size
        header.raw_sha256 = sorted_in.raw_sha256
        header.leaf_offset = HEADER_SIZE + header.summary_length
        index_stats = IOStats()
        with open(out_path, "w+b") as fh:
            summary = RegionWriter(fh, HEADER_SIZE, index_stats)
            leaves = LeafWriter(fh, header.leaf_offset, sorted_in.dtype, index_stats)
            group: list[np.ndarray] = []
            group_start = 0
            group_id = None

            def flush_group():
                top = builder.root.children[-1]
                builder.compact_subtree(top)
                records = np.concatenate(group)
                for leaf in top.iter_leaves():
                    leaf.leaf_id = len(leaves.entries)
                    leaves.add(records[leaf.first - group_start : leaf.last - group_start], last=False)

            position = 0
            for chunk in iter_sorted(sorted_in.path, sorted_in.dtype, sorted_in.sort_stats):
                if materialized:
                    out = np.empty(len(chunk), dtype=summary_dtype(key_len))
                    out["key"], out["offset"] = chunk["key"], chunk["offset"]
                    summary.write(out.tobytes())
                else:
                    summary.write(chunk.tobytes())
                raw_keys = np.ascontiguousarray(chunk["key"]).tobytes()
                cut = 0
                for i in range(len(chunk)):
                    key = int.from_bytes(raw_keys[i * key_len : (i + 1) * key_len], "big")
                    gid = key >> group_shift
                    if gid != group_id:
                        if group_id is not None:
                            group.append(chunk[cut:i])
                            flush_group()
                            group, cut, group_start = [], i, position
                        group_id = gid
                    builder.insert_bottom_up(key, position)
                    position += 1
                group.append(chunk[cut:])
            if group_id is not None:
                flush_group()
            leaves.close_chain()
            summary.flush()
            header.leaf_length = leaves.length
            header.leaf_count = len(leaves.entries)
            nodes, node_count, depth = encode_nodes(builder.root, builder)
            header.depth, header.root, header.node_count = depth, 0, node_count
            finish_file(fh, header, leaves.directory(), nodes, index_stats)
        counts = [e[2] for e in leaves.entries]
    finally:
        sorted_in.cleanup()
    mean_util, rest_util = leaf_utilization(counts, config.leaf_capacity)
    return BuildReport(
        kind="trie",
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
