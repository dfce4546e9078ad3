"""
How the memory budget changes the external sort
===============================================

Smaller budgets mean more sorted runs. While the runs can be merged in one
step every record is written twice and read twice (into a run, into the
merged file, and the matching reads). Once there are more runs than merge
buffers, every extra merge level costs one more read and write of the data.
A budget large enough for a single run skips the run files altogether.
"""

import tempfile
from pathlib import Path

from coconut_index import EngineConfig, build_tree, generate_random_walk

work = Path(tempfile.mkdtemp(prefix="coconut-sort-demo-"))
raw = work / "walks.bin"
generate_random_walk(raw, 100_000, 256, seed=3)

print(f"{'budget':>10} {'runs':>5} {'levels':>6} {'raw read':>9} {'sort read':>10} {'sort write':>11}")
for budget in (64 << 20, 1 << 20, 256 << 10, 64 << 10, 8 << 10):
    r = build_tree(raw, work / "tree.idx", EngineConfig(memory_budget=budget))
    print(f"{budget:>10} {r.sort_runs:>5} {r.sort_merge_levels:>6} {r.raw_read_ratio:>8.2f}x "
          f"{r.sort_read_passes:>9.2f}x {r.sort_write_passes:>10.2f}x")
