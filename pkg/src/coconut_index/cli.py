"""Command line: ``coconut-index {gen,build,query,bench}``.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 integrity error. Set ``COCONUT_TMPDIR`` to move sort runs elsewhere.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import tempfile
from pathlib import Path

import numpy as np

from .core import CoconutError, ConfigError, EngineConfig, FormatError, IntegrityError, count_series, read_series
from .datagen import generate_queries, generate_random_walk
from .index import open_index
from .query import EmptyIndexError, approx_search, brute_force_nn, exact_search
from .tree import build_tree
from .trie import build_trie

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTEGRITY = 0, 1, 2, 3

CSV_FIELDS = [
    "query_id",
    "distance",
    "offset",
    "leaves_visited",
    "series_fetched",
    "summaries_scanned",
    "bytes_read",
    "seconds",
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config_from_args(args, series_len: int) -> EngineConfig:
    flags = {
        "segment_count": "--segments",
        "bits_per_segment": "--bits",
        "leaf_capacity": "--leaf-capacity",
        "fill_factor": "--fill",
        "memory_budget": "--memory-budget",
        "series_len": "--length",
    }
    try:
        return EngineConfig(
            series_len=series_len,
            segment_count=args.segments,
            bits_per_segment=args.bits,
            leaf_capacity=args.leaf_capacity,
            fill_factor=args.fill,
            memory_budget=args.memory_budget,
        )
    except ConfigError as exc:
        msg = str(exc)
        culprit = next((flag for field, flag in flags.items() if msg.startswith(field.split("_")[0])), None)
        raise ConfigError(f"{culprit}: {msg}" if culprit else msg) from None


BUILDERS = {"tree": build_tree, "trie": build_trie}


def cmd_gen(args) -> int:
    gen = generate_queries if args.workload else generate_random_walk
    written = gen(args.out, args.count, args.length, args.seed)
    print(json.dumps({"out": str(args.out), "count": args.count, "length": args.length, "seed": args.seed, "bytes": written}))
    return EXIT_OK


def cmd_build(args) -> int:
    config = _config_from_args(args, args.length)
    report = BUILDERS[args.index](args.raw, args.out, config, materialized=args.materialized)
    text = json.dumps(report.to_dict(), indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _run_queries(index, queries: np.ndarray, mode: str, radius: int, raw_path, workers: int):
    results = []
    for q in queries:
        if mode == "approx":
            results.append(approx_search(index, q, radius))
        elif mode == "exact":
            results.append(exact_search(index, q, radius, workers=workers))
        else:
            results.append(brute_force_nn(raw_path, q, index.config.series_len))
    return results


def _write_csv(results, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for i, r in enumerate(results):
        writer.writerow([i, repr(r.distance), r.offset, r.leaves_visited, r.series_fetched,
                         r.summaries_scanned, r.bytes_read, f"{r.seconds:.6f}"])
    if results:
        mean = lambda name: float(np.mean([getattr(r, name) for r in results]))  # noqa: E731
        writer.writerow(["mean", repr(mean("distance")), "", mean("leaves_visited"), mean("series_fetched"),
                         mean("summaries_scanned"), mean("bytes_read"), f"{mean('seconds'):.6f}"])


def cmd_query(args) -> int:
    with open_index(args.index, args.raw) as index:
        n = index.config.series_len
        if args.length is not None and args.length != n:
            raise ConfigError(f"--length {args.length} does not match the index series length {n}")
        try:
            count_series(args.queries, n)
        except FormatError as exc:
            raise FormatError(f"workload does not match index series length {n}: {exc}") from None
        if args.mode == "oracle" and args.raw is None:
            raise ConfigError("--mode oracle needs --raw")
        queries = read_series(args.queries, n)
        results = _run_queries(index, queries, args.mode, args.radius, args.raw, args.workers)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            _write_csv(results, fh)
    else:
        _write_csv(results, sys.stdout)
    return EXIT_OK


def _bench_rows(scenario: dict, workdir: Path):
    datasets = scenario.get("datasets") or []
    kinds = scenario.get("indexes") or []
    if not datasets or not kinds:
        raise UsageError("scenario needs at least one dataset and one index type")
    for k in kinds:
        if k not in BUILDERS:
            raise UsageError(f"unknown index type {k!r}")
    budgets = scenario.get("memory_budgets") or [EngineConfig.memory_budget]
    materialized = scenario.get("materialized") or [False]
    radii = scenario.get("radius") or [1]
    modes = scenario.get("modes") or ["approx", "exact"]
    qspec = scenario.get("queries") or {"count": 10, "seed": 1}
    for d_i, ds in enumerate(datasets):
        length = ds.get("length", 256)
        raw = workdir / f"data-{d_i}.bin"
        generate_random_walk(raw, ds["count"], length, ds.get("seed", 0))
        qpath = workdir / f"queries-{d_i}.bin"
        generate_queries(qpath, qspec.get("count", 10), length, qspec.get("seed", 1))
        queries = read_series(qpath, length)
        for kind in kinds:
            for mat in materialized:
                for budget in budgets:
                    row = {"dataset": ds, "index": kind, "materialized": bool(mat), "memory_budget": budget}
                    try:
                        config = EngineConfig(
                            series_len=length,
                            segment_count=scenario.get("segments", 16),
                            bits_per_segment=scenario.get("bits", 8),
                            leaf_capacity=scenario.get("leaf_capacity", 2000),
                            fill_factor=scenario.get("fill", 1.0),
                            memory_budget=budget,
                        )
                        out = workdir / f"{kind}-{d_i}.idx"
                        report = BUILDERS[kind](raw, out, config, materialized=bool(mat), tmpdir=workdir)
                        row["build"] = report.to_dict()
                        row["queries"] = {}
                        with open_index(out, raw) as index:
                            for mode in modes:
                                for r in radii if mode != "oracle" else [0]:
                                    res = _run_queries(index, queries, mode, r, raw, 1)
                                    row["queries"][f"{mode}(r={r})"] = {
                                        "mean_distance": float(np.mean([x.distance for x in res])) if res else math.nan,
                                        "mean_seconds": float(np.mean([x.seconds for x in res])) if res else math.nan,
                                        "mean_series_fetched": float(np.mean([x.series_fetched for x in res])) if res else math.nan,
                                        "mean_bytes_read": float(np.mean([x.bytes_read for x in res])) if res else math.nan,
                                    }
                        out.unlink()
                    except CoconutError as exc:
                        row["error"] = f"{type(exc).__name__}: {exc}"
                    yield row


def cmd_bench(args) -> int:
    scenario = json.loads(Path(args.scenario).read_text())
    with tempfile.TemporaryDirectory(prefix="coconut-bench-", dir=args.workdir) as tmp:
        rows = list(_bench_rows(scenario, Path(tmp)))
    report = {"scenario": scenario, "rows": rows}
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_DATA if any("error" in r for r in rows) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coconut-index", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a random-walk dataset or query workload")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--workload", action="store_true", help="use the query stream of the seed")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build", help="bulk-load a tree or trie index over a raw file")
    p.add_argument("raw")
    p.add_argument("--index", choices=sorted(BUILDERS), default="tree")
    p.add_argument("--materialized", action="store_true")
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--segments", type=int, default=16)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--leaf-capacity", type=int, default=2000)
    p.add_argument("--fill", type=float, default=1.0)
    p.add_argument("--memory-budget", type=int, default=EngineConfig.memory_budget)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="also write the JSON report here")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="run a query workload against an index")
    p.add_argument("index")
    p.add_argument("--queries", required=True)
    p.add_argument("--raw", help="raw dataset (required for non-materialized indexes and oracle mode)")
    p.add_argument("--mode", choices=["approx", "exact", "oracle"], default="exact")
    p.add_argument("--radius", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--length", type=int, help="series length of the workload (checked against the index)")
    p.add_argument("--out", help="CSV output (default stdout)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="run a JSON scenario and write a consolidated report")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    p.add_argument("--workdir")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "radius", 0) is not None and getattr(args, "radius", 0) < 0:
            raise UsageError("--radius must be >= 0")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (FormatError, EmptyIndexError, OSError, CoconutError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
