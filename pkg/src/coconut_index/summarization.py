"""PAA/SAX summaries, their sortable bit-interleaved keys, and the SAX lower bound.

A SAX word is an array of ``w`` region codes of ``b`` bits each. Its sortable
key interleaves those bits so that all most-significant bits (segment order)
come first, then all second bits, and so on. Bit ``i * w + j`` of the key is
bit ``i`` (0 = most significant) of segment ``j``; the bit string is packed
big-endian into ``ceil(w * b / 8)`` bytes with zero padding, so plain byte
comparison of keys walks the z-order curve of the summary space.

Most functions accept a single series/word or a 2-D batch (one per row).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import ndtri

from .core import ConfigError, IntegrityError

__all__ = [
    "compute_breakpoints",
    "paa",
    "sax",
    "invert_sum",
    "restore_sum",
    "key_bytes",
    "cell_bounds",
    "mindist",
    "mindist_paa",
    "key_to_int",
    "common_prefix_bits",
]


def key_bytes(segments: int, bits: int) -> int:
    return (segments * bits + 7) // 8


@lru_cache(maxsize=None)
def _breakpoints(bits: int) -> np.ndarray:
    regions = 1 << bits
    cuts = ndtri(np.arange(1, regions) / regions)
    # ndtri is exact at 0.5 up to rounding; force the symmetry the codes rely on
    cuts = 0.5 * (cuts - cuts[::-1])
    cuts.setflags(write=False)
    return cuts


def compute_breakpoints(bits: int) -> np.ndarray:
    """Standard-normal quantiles splitting the real line into ``2**bits`` regions.

    >>> compute_breakpoints(1)
    array([0.])
    """
    if not isinstance(bits, (int, np.integer)) or not 1 <= bits <= 8:
        raise ConfigError(f"bits per segment must be in [1, 8], got {bits!r}")
    return _breakpoints(int(bits))


def paa(series, segments: int) -> np.ndarray:
    """Piecewise aggregate approximation: the mean of each of ``segments`` equal slices."""
    x = np.asarray(series, dtype=np.float64)
    n = x.shape[-1]
    if segments <= 0 or n % segments:
        raise ConfigError(f"segment count {segments} does not divide series length {n}")
    return x.reshape(x.shape[:-1] + (segments, n // segments)).mean(axis=-1)


def sax(series, segments: int, bits: int) -> np.ndarray:
    """SAX word(s) of ``series`` as uint8 codes; region 0 is the lowest.

    A PAA value equal to a breakpoint falls in the region above it.
    """
    cuts = compute_breakpoints(bits)
    return np.searchsorted(cuts, paa(series, segments), side="right").astype(np.uint8)


def _check_words(words: np.ndarray, bits: int) -> None:
    if np.any(words >> bits):
        raise ConfigError(f"SAX code out of range for {bits} bits")


def invert_sum(words, bits: int):
    """Interleave the bits of SAX word(s) into sortable key(s).

    A 1-D word gives ``bytes``; a 2-D batch gives an ``(N, key_bytes)`` uint8 array.
    """
    w_arr = np.asarray(words)
    single = w_arr.ndim == 1
    codes = np.atleast_2d(w_arr).astype(np.uint8)
    _check_words(codes, bits)
    count, segments = codes.shape
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint8)
    # (N, bit i, segment j) -> flattened index i * w + j
    planes = (codes[:, None, :] >> shifts[None, :, None]) & 1
    flat = planes.reshape(count, bits * segments)
    pad = key_bytes(segments, bits) * 8 - bits * segments
    if pad:
        flat = np.concatenate([flat, np.zeros((count, pad), dtype=np.uint8)], axis=1)
    keys = np.packbits(flat, axis=1)
    return keys[0].tobytes() if single else keys


def restore_sum(keys, segments: int, bits: int) -> np.ndarray:
    """Inverse of :func:`invert_sum`; raises IntegrityError on nonzero pad bits."""
    single = isinstance(keys, (bytes, bytearray, memoryview))
    if single:
        arr = np.frombuffer(bytes(keys), dtype=np.uint8)[None, :]
    else:
        arr = np.atleast_2d(np.asarray(keys, dtype=np.uint8))
    nbytes = key_bytes(segments, bits)
    if arr.shape[1] != nbytes:
        raise ConfigError(f"key has {arr.shape[1]} bytes, expected {nbytes}")
    flat = np.unpackbits(arr, axis=1)
    used = segments * bits
    if np.any(flat[:, used:]):
        raise IntegrityError("nonzero pad bits in sortable key")
    planes = flat[:, :used].reshape(-1, bits, segments).astype(np.uint8)
    shifts = np.arange(bits - 1, -1, -1, dtype=np.uint8)
    words = np.bitwise_or.reduce(planes << shifts[None, :, None], axis=1).astype(np.uint8)
    return words[0] if single else words


def cell_bounds(words, bits: int) -> tuple[np.ndarray, np.ndarray]:
    """Lower/upper value bounds of each code's region (``-inf``/``inf`` at the ends)."""
    cuts = compute_breakpoints(bits)
    edges = np.concatenate([[-np.inf], cuts, [np.inf]])
    codes = np.asarray(words, dtype=np.intp)
    return edges[codes], edges[codes + 1]


def mindist_paa(query_paa, lower, upper, series_len: int) -> np.ndarray:
    """Lower bound from a query PAA to the regions ``[lower, upper)`` of stored words.

    ``lower``/``upper`` may be batched along the first axis.
    """
    q = np.asarray(query_paa, dtype=np.float64)
    gap = np.maximum(lower - q, 0.0) + np.maximum(q - upper, 0.0)
    segments = q.shape[-1]
    return np.sqrt(series_len / segments) * np.sqrt(np.sum(gap * gap, axis=-1))


def mindist(query, word, bits: int) -> float:
    """SAX MINDIST between a raw query and a SAX word; never exceeds the true ED."""
    q = np.asarray(query, dtype=np.float64)
    w_arr = np.asarray(word)
    if w_arr.ndim != 1:
        raise ConfigError("mindist takes a single word; use mindist_paa for batches")
    _check_words(w_arr.astype(np.uint8), bits)
    segments = w_arr.size
    lower, upper = cell_bounds(w_arr, bits)
    return float(mindist_paa(paa(q, segments), lower, upper, q.size))


def key_to_int(key: bytes) -> int:
    return int.from_bytes(key, "big")


def common_prefix_bits(a: bytes, b: bytes) -> int:
    """Length of the common leading bit string of two equal-length keys."""
    total = 8 * len(a)
    diff = int.from_bytes(a, "big") ^ int.from_bytes(b, "big")
    return total - diff.bit_length()
