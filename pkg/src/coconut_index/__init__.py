"""Sortable SAX summaries and bottom-up bulk-loaded data-series indexes."""

from .core import (
    CoconutError,
    ConfigError,
    ContractError,
    EngineConfig,
    FormatError,
    IntegrityError,
    euclidean_distance,
    read_series,
    write_series,
    z_normalize,
)
from .datagen import generate_queries, generate_random_walk, random_walks
from .index import IndexRecord, SeriesIndex, open_index
from .query import EmptyIndexError, QueryResult, approx_search, brute_force_nn, exact_search
from .summarization import compute_breakpoints, invert_sum, mindist, paa, restore_sum, sax
from .tree import build_tree
from .trie import build_trie

__version__ = "0.1.0"

__all__ = [
    "CoconutError",
    "ConfigError",
    "ContractError",
    "EmptyIndexError",
    "EngineConfig",
    "FormatError",
    "IndexRecord",
    "IntegrityError",
    "QueryResult",
    "SeriesIndex",
    "approx_search",
    "brute_force_nn",
    "build_tree",
    "build_trie",
    "compute_breakpoints",
    "euclidean_distance",
    "exact_search",
    "generate_queries",
    "generate_random_walk",
    "invert_sum",
    "mindist",
    "open_index",
    "paa",
    "random_walks",
    "read_series",
    "restore_sum",
    "sax",
    "write_series",
    "z_normalize",
]
