"""Engine configuration, raw series files, z-normalization and Euclidean distance.

Series are handled as 1-D ``float64`` numpy arrays. On disk a dataset is a
headerless run of little-endian ``float32`` values, ``series_len`` per series.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass

import numpy as np

__all__ = [
    "CoconutError",
    "ConfigError",
    "FormatError",
    "IntegrityError",
    "ContractError",
    "EngineConfig",
    "z_normalize",
    "z_normalize_rows",
    "euclidean_distance",
    "series_bytes",
    "count_series",
    "open_raw",
    "read_series",
    "write_series",
]

RAW_DTYPE = np.dtype("<f4")


class CoconutError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CoconutError, ValueError):
    """Invalid configuration or mismatched input shape."""


class FormatError(CoconutError):
    """A file does not follow the expected binary layout."""


class IntegrityError(CoconutError):
    """Stored data violates an invariant (corruption, stale raw file, ...)."""


class ContractError(CoconutError, ValueError):
    """A caller broke a precondition, e.g. fed unsorted records to a bulk loader."""


@dataclass(frozen=True)
class EngineConfig:
    """Parameters shared by summarization, sorting, building and querying.

    ``memory_budget`` and ``block_size`` are byte counts; the first bounds the
    size of every in-memory sort run, the second is the unit of buffered I/O.
    """

    series_len: int = 256
    segment_count: int = 16
    bits_per_segment: int = 8
    leaf_capacity: int = 2000
    fill_factor: float = 1.0
    memory_budget: int = 64 * 1024 * 1024
    block_size: int = 4096

    def __post_init__(self):
        for name in ("series_len", "segment_count", "leaf_capacity", "memory_budget", "block_size"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.series_len < 2:
            raise ConfigError("series_len must be at least 2")
        if self.series_len % self.segment_count:
            raise ConfigError(
                f"segment_count {self.segment_count} does not divide series_len {self.series_len}"
            )
        if not 1 <= self.bits_per_segment <= 8:
            raise ConfigError(f"bits_per_segment must be in [1, 8], got {self.bits_per_segment}")
        if self.segment_count * self.bits_per_segment > 512:
            raise ConfigError("segment_count * bits_per_segment must not exceed 512")
        if self.leaf_capacity < 2:
            raise ConfigError("leaf_capacity must be at least 2")
        if not 0.5 < self.fill_factor <= 1.0:
            raise ConfigError(f"fill_factor must be in (0.5, 1.0], got {self.fill_factor}")

    @property
    def key_bytes(self) -> int:
        return (self.segment_count * self.bits_per_segment + 7) // 8

    @property
    def series_bytes(self) -> int:
        return series_bytes(self.series_len)

    @property
    def leaf_fill(self) -> int:
        """Entries per leaf at bulk-load time."""
        return min(self.leaf_capacity, int(np.ceil(self.fill_factor * self.leaf_capacity - 1e-9)))

    def to_dict(self) -> dict:
        return asdict(self)


def z_normalize(values, series_len: int | None = None) -> np.ndarray:
    """Return ``(values - mean) / std`` in float64, using the population std.

    A constant series maps to all zeros instead of NaN.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ConfigError("z_normalize needs a 1-D sequence of at least 2 values")
    if series_len is not None and x.size != series_len:
        raise ConfigError(f"expected {series_len} values, got {x.size}")
    centered = x - x.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std < 1e-12:
        return np.zeros_like(x)
    return centered / std


def z_normalize_rows(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=1, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=1, keepdims=True))
    safe = np.where(std < 1e-12, 1.0, std)
    return np.where(std < 1e-12, 0.0, centered / safe)


def euclidean_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"length mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.sqrt(np.dot(diff, diff)))


def series_bytes(series_len: int) -> int:
    return RAW_DTYPE.itemsize * series_len


def count_series(path, series_len: int) -> int:
    """Number of series in a raw file; the size must be a whole multiple."""
    size = os.path.getsize(path)
    rec = series_bytes(series_len)
    if size % rec:
        raise FormatError(f"{path}: size {size} is not a multiple of {rec} bytes")
    return size // rec


def open_raw(path, series_len: int) -> np.ndarray:
    """Memory-map a raw dataset as an ``(N, series_len)`` float32 array."""
    count = count_series(path, series_len)
    if count == 0:
        return np.zeros((0, series_len), dtype=RAW_DTYPE)
    return np.memmap(path, dtype=RAW_DTYPE, mode="r", shape=(count, series_len))


def read_series(path, series_len: int) -> np.ndarray:
    """Load a whole raw file into memory as float64 rows."""
    return np.asarray(open_raw(path, series_len), dtype=np.float64)


def write_series(path, rows) -> None:
    rows = np.asarray(rows)
    if rows.ndim == 1:
        rows = rows[None, :]
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(rows, dtype=RAW_DTYPE).tobytes())
