"""Synthetic random-walk datasets and query workloads.

Generation is bit-reproducible from the seed alone:

* The PRNG is numpy's PCG64 (XSL-RR 128/64) seeded through
  ``SeedSequence(seed, spawn_key=(stream,))``; stream 0 is the dataset,
  stream 1 the query workload.
* Raw 64-bit outputs ``x`` (``random_raw``) become uniforms
  ``u = ((x >> 11) + 0.5) * 2**-53`` and Gaussians ``z = ndtri(u)``.
* Series ``i`` consumes outputs ``i*n .. i*n + n - 1``: its first value is
  ``z[0]`` and every following value adds the next draw. The walk is then
  z-normalized in float64 and stored as float32.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from .core import ConfigError, RAW_DTYPE, z_normalize_rows

__all__ = ["generate_random_walk", "generate_queries", "random_walks", "gaussian_steps"]

DATA_STREAM = 0
QUERY_STREAM = 1


def _bit_generator(seed: int, stream: int) -> np.random.PCG64:
    return np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream,)))


def gaussian_steps(bitgen: np.random.PCG64, count: int) -> np.ndarray:
    """``count`` standard-normal draws by inverse CDF of 53-bit uniforms."""
    raw = bitgen.random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def random_walks(count: int, length: int, seed: int, normalize: bool = True, stream: int = DATA_STREAM) -> np.ndarray:
    """In-memory ``(count, length)`` float64 random walks."""
    _check(count, length, allow_zero=True)
    bitgen = _bit_generator(seed, stream)
    walks = np.cumsum(gaussian_steps(bitgen, count * length).reshape(count, length), axis=1)
    return z_normalize_rows(walks) if normalize and count else walks


def _write(path, count: int, length: int, seed: int, stream: int, chunk_rows: int = 4096) -> int:
    bitgen = _bit_generator(seed, stream)
    with open(path, "wb") as fh:
        done = 0
        while done < count:
            rows = min(chunk_rows, count - done)
            walks = np.cumsum(gaussian_steps(bitgen, rows * length).reshape(rows, length), axis=1)
            fh.write(z_normalize_rows(walks).astype(RAW_DTYPE).tobytes())
            done += rows
    return count * length * RAW_DTYPE.itemsize


def _check(count: int, length: int, allow_zero: bool) -> None:
    if count < (0 if allow_zero else 1):
        raise ConfigError(f"series count must be >= {0 if allow_zero else 1}, got {count}")
    if length < 2:
        raise ConfigError(f"series length must be >= 2, got {length}")


def generate_random_walk(path, count: int, length: int = 256, seed: int = 0) -> int:
    """Write ``count`` z-normalized random walks to ``path``; returns bytes written."""
    _check(count, length, allow_zero=False)
    return _write(path, count, length, seed, DATA_STREAM)


def generate_queries(path, count: int, length: int = 256, seed: int = 0) -> int:
    """Write a query workload (same format, independent stream); ``count`` may be 0."""
    _check(count, length, allow_zero=True)
    return _write(path, count, length, seed, QUERY_STREAM)
