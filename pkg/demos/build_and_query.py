"""
Bulk-loading a tree and a trie, then querying both
==================================================

Generates a random-walk collection, builds both index types over it and
compares their leaves, approximate answers and exact answers against a full
scan. Runs in well under a minute.
"""

import tempfile
from pathlib import Path

import numpy as np

from coconut_index import (
    EngineConfig,
    approx_search,
    brute_force_nn,
    build_tree,
    build_trie,
    exact_search,
    generate_queries,
    generate_random_walk,
    open_index,
    read_series,
)

work = Path(tempfile.mkdtemp(prefix="coconut-demo-"))
raw, qfile = work / "walks.bin", work / "queries.bin"
generate_random_walk(raw, 50_000, 256, seed=1)
generate_queries(qfile, 10, 256, seed=1)
queries = read_series(qfile, 256)
config = EngineConfig()

# %%
# Both builders sort the summaries once; the tree packs leaves full, the
# trie splits on shared key prefixes and ends up with many small leaves.
reports = {
    "tree": build_tree(raw, work / "tree.idx", config),
    "trie": build_trie(raw, work / "trie.idx", config),
}
for name, r in reports.items():
    print(f"{name}: {r.leaf_count} leaves, depth {r.depth}, utilization {r.mean_utilization:.3f}, "
          f"built in {r.wall_time:.2f}s")

# %%
# Approximate search reads a few neighbouring leaves; exact search starts
# from that answer and skips every summary whose lower bound cannot win.
truth = [brute_force_nn(raw, q) for q in queries]
for name in reports:
    with open_index(work / f"{name}.idx", raw) as idx:
        approx = [approx_search(idx, q, radius=1) for q in queries]
        exact = [exact_search(idx, q) for q in queries]
    ratio = np.mean([a.distance / t.distance for a, t in zip(approx, truth)])
    same = sum(abs(e.distance - t.distance) <= 1e-6 * t.distance for e, t in zip(exact, truth))
    fetched = np.mean([e.series_fetched for e in exact])
    print(f"{name}: approx/true distance {ratio:.3f}, exact correct {same}/{len(queries)}, "
          f"series fetched {fetched:.0f} of {len(read_series(raw, 256))}")
