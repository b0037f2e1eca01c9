"""Seeded hash family and single-row sketch primitives.

Every hash in the package is a pure function of ``(seed, purpose, key)``.
Keys are reduced to a 64-bit fingerprint once (see :func:`key_fingerprint`)
and all hashing after that is done on fingerprints, either one at a time or
as ``numpy.uint64`` arrays. Scalar and array calls produce identical values.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

FlowKey = tuple
KeyLike = Union[int, np.integer, np.ndarray]

MASK64 = (1 << 64) - 1
DEFAULT_LEVELS = 16

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


class SketchKind(str, enum.Enum):
    CS = "cs"
    CMS = "cms"
    UM = "um"


class Purpose(enum.IntEnum):
    INDEX = 0
    SIGN = 1
    SUBEPOCH = 2
    LEVEL = 3


# Folded into the seed so each purpose gets an unrelated hash stream.
_PURPOSE_SALT = {
    Purpose.INDEX: 0x6A09E667F3BCC908,
    Purpose.SIGN: 0xBB67AE8584CAA73B,
    Purpose.SUBEPOCH: 0x3C6EF372FE94F82B,
    Purpose.LEVEL: 0xA54FF53A5F1D36F1,
}


def _fmix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps.
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def mix64(*parts: int) -> int:
    """Fold integers into one 64-bit value (seed derivation helper)."""
    acc = np.zeros(1, dtype=np.uint64)
    for p in parts:
        acc = _fmix(acc + _GOLDEN + np.asarray([int(p) & MASK64], dtype=np.uint64))
    return int(acc[0])


def key_fingerprint(key: FlowKey | bytes | str | int) -> int:
    """Stable 64-bit fingerprint of a flow key."""
    if isinstance(key, (int, np.integer)):
        data = struct.pack("<Q", int(key) & MASK64)
    elif isinstance(key, bytes):
        data = key
    elif isinstance(key, str):
        data = key.encode()
    else:
        data = b"".join(struct.pack("<q", int(f)) for f in key)
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class HashSeed:
    value: int
    purpose: Purpose

    def __post_init__(self):
        if not 0 <= self.value <= MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.value}")

    def stream(self) -> np.uint64:
        return _stream(self.value, self.purpose)

    def derive(self, *parts: int) -> "HashSeed":
        return HashSeed(mix64(self.value, *parts), self.purpose)


@functools.lru_cache(maxsize=65536)
def _stream(value: int, purpose: Purpose) -> np.uint64:
    return np.uint64(mix64(value, _PURPOSE_SALT[purpose]))


def _hash(seed: HashSeed, key: KeyLike) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(key, dtype=np.uint64))
    s = seed.stream()
    return _fmix(_fmix(arr ^ s) + s)


def _unwrap(value: np.ndarray, key: KeyLike):
    if np.ndim(key) == 0:
        return int(value[0])
    return value


def hash_index(seed: HashSeed, key: KeyLike, w: int):
    """Bucket index in ``[0, w)``."""
    if w < 1:
        raise ValueError("w must be >= 1")
    h = _hash(seed, key) % np.uint64(w)
    return _unwrap(h.astype(np.int64), key)


def hash_sign(seed: HashSeed, key: KeyLike):
    """+1 or -1 from the top bit of the hash."""
    top = (_hash(seed, key) >> np.uint64(63)).astype(np.int64)
    return _unwrap(1 - 2 * top, key)


def hash_level(seed: HashSeed, key: KeyLike, levels: int = DEFAULT_LEVELS):
    """Geometric level in ``[0, levels]``: number of trailing one bits."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h = _hash(seed, key)
    out = np.zeros(h.shape, dtype=np.int64)
    alive = np.ones(h.shape, dtype=bool)
    for bit in range(levels):
        alive &= ((h >> np.uint64(bit)) & np.uint64(1)).astype(bool)
        out += alive
    return _unwrap(out, key)


@dataclass
class CountMinRow:
    width: int
    index_seed: HashSeed
    counters: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.counters is None:
            self.counters = np.zeros(self.width, dtype=np.int64)

    def update(self, key: int, weight: int = 1) -> None:
        if weight < 1:
            raise ValueError("weight must be >= 1")
        self.counters[hash_index(self.index_seed, key, self.width)] += weight

    def query(self, key: int) -> float:
        return float(self.counters[hash_index(self.index_seed, key, self.width)])

    def reset(self) -> None:
        self.counters[:] = 0


@dataclass
class CountRow:
    """Count Sketch row: signed counters."""

    width: int
    index_seed: HashSeed
    sign_seed: HashSeed
    counters: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.counters is None:
            self.counters = np.zeros(self.width, dtype=np.int64)

    def update(self, key: int, weight: int = 1) -> None:
        if weight < 1:
            raise ValueError("weight must be >= 1")
        i = hash_index(self.index_seed, key, self.width)
        self.counters[i] += hash_sign(self.sign_seed, key) * weight

    def query(self, key: int) -> float:
        i = hash_index(self.index_seed, key, self.width)
        return float(hash_sign(self.sign_seed, key) * self.counters[i])

    def reset(self) -> None:
        self.counters[:] = 0


def level_seeds(index_seed: HashSeed, sign_seed: HashSeed, level: int) -> tuple[HashSeed, HashSeed]:
    """Per-level row seeds of a level stack, derived from the stack's base seeds."""
    return index_seed.derive(level), sign_seed.derive(level)


@dataclass
class LevelStack:
    """UnivMon level stack: ``levels`` Count Sketch rows of equal width.

    A key is inserted into levels ``0..min(hash_level(key), levels - 1)``.
    """

    width: int
    index_seed: HashSeed
    sign_seed: HashSeed
    level_seed: HashSeed
    levels: int = DEFAULT_LEVELS
    rows: list[CountRow] = field(default=None, repr=False)

    def __post_init__(self):
        if self.width < 1 or self.levels < 1:
            raise ValueError("width and levels must be >= 1")
        if self.rows is None:
            self.rows = []
            for lvl in range(self.levels):
                iseed, sseed = level_seeds(self.index_seed, self.sign_seed, lvl)
                self.rows.append(CountRow(self.width, iseed, sseed))

    @property
    def counters(self) -> np.ndarray:
        return np.stack([r.counters for r in self.rows])

    def top_level(self, key: int) -> int:
        return min(hash_level(self.level_seed, key, self.levels), self.levels - 1)

    def update(self, key: int, weight: int = 1) -> None:
        for lvl in range(self.top_level(key) + 1):
            self.rows[lvl].update(key, weight)

    def query(self, key: int, level: int = 0) -> float:
        return self.rows[level].query(key)

    def reset(self) -> None:
        for r in self.rows:
            r.reset()


def row_update(row, key: int, weight: int = 1):
    row.update(key, weight)
    return row


def row_query(row, key: int) -> float:
    return row.query(key)


def level_update(stack: LevelStack, key: int, weight: int = 1) -> LevelStack:
    stack.update(key, weight)
    return stack
