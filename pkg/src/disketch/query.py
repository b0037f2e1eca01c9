"""Central query engine.

Per epoch, a key's estimate is built from the records of the fragments on
its path that sampled it:

1. pick, per on-path fragment, the record(s) whose subepoch sampled the key;
2. project all records onto ``n_m`` equal normalized subepochs (``n_m`` the
   largest ``n`` among them), each record spreading its raw estimate evenly
   over the ``n_m / n`` columns it covers;
3. merge each column with the sketch's row-merge rule (min for Count-Min,
   median for Count Sketch), fill uncovered columns with the mean of the
   covered ones, and sum the columns.

Per-epoch results are then summed (or averaged) over the query window.

The scalar functions (:func:`epoch_estimate`, :func:`run_query`) follow these
steps literally and serve as the reference. :func:`estimate_matrix` does the
same for many keys and epochs at once with numpy and is what experiments use.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .records import NotReadyError, RecordStore, SubepochRecord
from .sketch import DEFAULT_LEVELS, SketchKind, hash_index, hash_level, hash_sign, level_seeds


class QueryError(RuntimeError):
    pass


class PathResolutionError(QueryError):
    pass


class UnsupportedQueryError(QueryError):
    pass


class QueryType(str, enum.Enum):
    FREQUENCY = "frequency"
    HEAVY_HITTERS = "heavy_hitters"
    ENTROPY = "entropy"


class EpochMerge(str, enum.Enum):
    SUM = "sum"
    AVERAGE = "average"


@dataclass(frozen=True)
class Query:
    type: QueryType
    epochs: tuple[int, ...]
    key: int | None = None  # key fingerprint
    epoch_merge: EpochMerge = EpochMerge.SUM
    mitigation: bool = False

    def __post_init__(self):
        object.__setattr__(self, "type", QueryType(self.type))
        object.__setattr__(self, "epoch_merge", EpochMerge(self.epoch_merge))
        if not self.epochs:
            raise QueryError("query window must cover at least one epoch")
        if self.type is QueryType.FREQUENCY and self.key is None:
            raise QueryError("frequency queries need a key")

    @classmethod
    def for_window(cls, type: QueryType, start: int, end: int, epoch_ticks: int, **kw) -> "Query":
        if start % epoch_ticks or end % epoch_ticks or end <= start:
            raise QueryError(f"window [{start}, {end}) is not aligned to whole epochs of {epoch_ticks} ticks")
        return cls(type, tuple(range(start // epoch_ticks, end // epoch_ticks)), **kw)


# -- scalar reference path -----------------------------------------------------


def record_estimate(record: SubepochRecord, fingerprint: int, level: int = 0) -> float:
    """Raw single-row estimate ``O_R`` of a key from one record."""
    seeds = record.seeds
    if record.kind is SketchKind.CMS:
        return float(record.counters[hash_index(seeds.index_seed, fingerprint, record.width)])
    if record.kind is SketchKind.CS:
        i = hash_index(seeds.index_seed, fingerprint, record.width)
        return float(hash_sign(seeds.sign_seed, fingerprint) * record.counters[i])
    iseed, sseed = level_seeds(seeds.index_seed, seeds.sign_seed, level)
    i = hash_index(iseed, fingerprint, record.width)
    return float(hash_sign(sseed, fingerprint) * record.counters[level][i])


def select_records(store: RecordStore, epoch: int, path: Sequence[str], fingerprint: int,
                   mitigation: bool = False) -> list[SubepochRecord]:
    if not path:
        raise PathResolutionError("empty path")
    single = mitigation and len(path) == 1
    out = []
    for frag in path:
        out.extend(store.lookup_for_key(frag, epoch, fingerprint, mitigated=single))
    return out


@dataclass
class NormalizedGrid:
    n_m: int
    columns: list[list[float]] = field(default_factory=list)

    @property
    def blind_spots(self) -> list[int]:
        return [i for i, c in enumerate(self.columns) if not c]


def build_grid(records: Sequence[SubepochRecord], fingerprint: int, level: int = 0) -> NormalizedGrid:
    if not records:
        raise QueryError("no records to build a grid from")
    n_m = max(r.n for r in records)
    grid = NormalizedGrid(n_m, [[] for _ in range(n_m)])
    for r in records:
        share = n_m // r.n
        part = record_estimate(r, fingerprint, level) / share
        for col in range(r.subepoch * share, (r.subepoch + 1) * share):
            grid.columns[col].append(part)
    return grid


def median(values: Sequence[float]) -> float:
    s = sorted(values)
    mid = len(s) // 2
    return s[mid] if len(s) % 2 else (s[mid - 1] + s[mid]) / 2


def merge_values(values: Sequence[float], kind: SketchKind) -> float:
    return min(values) if SketchKind(kind) is SketchKind.CMS else median(values)


def merge_grid(grid: NormalizedGrid, kind: SketchKind) -> list[float]:
    """Per-column merged estimates, blind spots filled with the covered mean."""
    merged = [merge_values(c, kind) if c else None for c in grid.columns]
    covered = [m for m in merged if m is not None]
    if not covered:
        raise QueryError("internal error: no normalized subepoch is covered")
    fill = sum(covered) / len(covered)
    return [fill if m is None else m for m in merged]


def epoch_estimate(records: Sequence[SubepochRecord], fingerprint: int, kind: SketchKind | None = None,
                   level: int = 0) -> float:
    """Per-epoch estimate ``O_E`` of one key from its selected records."""
    if not records:
        raise QueryError("no records")
    if len({r.epoch for r in records}) != 1:
        raise QueryError("records span several epochs")
    kind = records[0].kind if kind is None else SketchKind(kind)
    return float(sum(merge_grid(build_grid(records, fingerprint, level), kind)))


def merge_epochs(values: Sequence[float], how: EpochMerge) -> float:
    total = float(sum(values))
    return total if EpochMerge(how) is EpochMerge.SUM else total / len(values)


def run_query(query: Query, store: RecordStore, path: Sequence[str]) -> float:
    if query.type is QueryType.ENTROPY:
        raise UnsupportedQueryError("use entropy_estimate for entropy queries")
    if not store.sealed:
        raise NotReadyError("record store is not sealed")
    per_epoch = [
        epoch_estimate(select_records(store, e, path, query.key, query.mitigation), query.key)
        for e in query.epochs
    ]
    return merge_epochs(per_epoch, query.epoch_merge)


# -- batched path ------------------------------------------------------------------

_GRID_CELLS = 1 << 22


@dataclass
class PathLayout:
    """(key, slot) pairs grouped by fragment; single-hop keys get a second slot under mitigation."""

    slots: int
    by_frag: dict[str, tuple[np.ndarray, np.ndarray]]
    single: np.ndarray

    @classmethod
    def build(cls, paths: Sequence[Sequence[str]], mitigation: bool) -> "PathLayout":
        lengths = np.fromiter((len(p) for p in paths), dtype=np.int64, count=len(paths))
        if (lengths == 0).any():
            raise PathResolutionError("empty path")
        slots = int(lengths.max()) if len(lengths) else 1
        if mitigation:
            slots = max(slots, 2)
        keys = np.repeat(np.arange(len(paths)), lengths)
        pos = np.arange(int(lengths.sum())) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        frags = np.array([f for p in paths for f in p], dtype=object)
        by_frag = {}
        if len(frags):
            names, inv = np.unique(frags.astype(str), return_inverse=True)
            order = np.argsort(inv, kind="stable")
            bounds = np.searchsorted(inv[order], np.arange(len(names) + 1))
            for i, f in enumerate(names):
                sel = order[bounds[i]:bounds[i + 1]]
                by_frag[str(f)] = (keys[sel], pos[sel])
        return cls(slots, by_frag, lengths == 1)


def _gather(store: RecordStore, frag: str, epoch: int, fp: np.ndarray, level: int):
    n = store.n_of(frag, epoch)
    blk = store.block(frag, epoch)
    rec = store.get(frag, epoch, 0)
    seeds = rec.seeds
    s = hash_index(seeds.subepoch_seed, fp, n)
    if rec.kind is SketchKind.CMS:
        idx = hash_index(seeds.index_seed, fp, rec.width)
        return n, s, lambda sub, m=slice(None): blk[sub, idx[m]].astype(np.float64)
    if rec.kind is SketchKind.CS:
        idx = hash_index(seeds.index_seed, fp, rec.width)
        sign = hash_sign(seeds.sign_seed, fp)
        return n, s, lambda sub, m=slice(None): (sign[m] * blk[sub, idx[m]]).astype(np.float64)
    iseed, sseed = level_seeds(seeds.index_seed, seeds.sign_seed, level)
    idx = hash_index(iseed, fp, rec.width)
    sign = hash_sign(sseed, fp)
    return n, s, lambda sub, m=slice(None): (sign[m] * blk[sub, level, idx[m]]).astype(np.float64)


def _compose(vals: np.ndarray, ns: np.ndarray, ss: np.ndarray, kind: SketchKind) -> np.ndarray:
    """Vectorized grid build + merge + blind-spot fill for keys sharing n_m."""
    K, H = vals.shape
    M = int(ns.max())
    present = ns > 0
    share = np.where(present, M // np.maximum(ns, 1), 1)
    part = vals / share
    out = np.empty(K)
    step = max(1, _GRID_CELLS // max(1, M * H))
    cols = np.arange(M)[None, :, None]
    for a in range(0, K, step):
        b = min(K, a + step)
        cover = present[a:b, None, :] & (cols // share[a:b, None, :] == ss[a:b, None, :])
        if kind is SketchKind.CMS:
            merged = np.where(cover, part[a:b, None, :], np.inf).min(axis=2)
            merged[~cover.any(axis=2)] = np.nan
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                merged = np.nanmedian(np.where(cover, part[a:b, None, :], np.nan), axis=2)
        covered = ~np.isnan(merged)
        cnt = covered.sum(axis=1)
        mean = np.where(covered, merged, 0.0).sum(axis=1) / np.maximum(cnt, 1)
        out[a:b] = np.where(covered, merged, mean[:, None]).sum(axis=1)
    return out


def estimate_matrix(store: RecordStore, fingerprints: np.ndarray, paths: Sequence[Sequence[str]],
                    epochs: Sequence[int], mitigation: bool = False, level: int = 0,
                    active: np.ndarray | None = None, kind: SketchKind | None = None,
                    layout: PathLayout | None = None) -> np.ndarray:
    """Per-epoch estimates for many keys: array of shape ``(len(keys), len(epochs))``.

    ``active`` optionally masks which (key, epoch) cells to compute; the rest
    are NaN. ``layout`` may carry a precomputed :class:`PathLayout` for ``paths``.
    """
    if not store.sealed:
        raise NotReadyError("record store is not sealed")
    fingerprints = np.asarray(fingerprints, dtype=np.uint64)
    K = len(fingerprints)
    out = np.full((K, len(epochs)), np.nan)
    if K == 0:
        return out
    if layout is None:
        layout = PathLayout.build(paths, mitigation)
    slots, by_frag, single = layout.slots, layout.by_frag, layout.single
    for col, e in enumerate(epochs):
        want = np.ones(K, dtype=bool) if active is None else active[:, col]
        if not want.any():
            continue
        vals = np.full((K, slots), np.nan)
        ns = np.zeros((K, slots), dtype=np.int64)
        ss = np.zeros((K, slots), dtype=np.int64)
        ekind = kind
        for frag, (ks, js) in by_frag.items():
            sel = want[ks]
            if not sel.any():
                continue
            ks_f, js_f = ks[sel], js[sel]
            if ekind is None:
                ekind = store.get(frag, e, 0).kind
            n, s, read = _gather(store, frag, e, fingerprints[ks_f], level)
            vals[ks_f, js_f] = read(s)
            ns[ks_f, js_f] = n
            ss[ks_f, js_f] = s
            if mitigation and n >= 2:
                m = single[ks_f]
                if m.any():
                    s2 = (s[m] + n // 2) % n
                    vals[ks_f[m], 1] = read(s2, m)
                    ns[ks_f[m], 1] = n
                    ss[ks_f[m], 1] = s2
        nm = ns.max(axis=1)
        for M in np.unique(nm[want]):
            g = np.flatnonzero(want & (nm == M))
            out[g, col] = _compose(vals[g], ns[g], ss[g], SketchKind(ekind))
    return out


def frequencies(store: RecordStore, fingerprints: np.ndarray, paths: Sequence[Sequence[str]],
                epochs: Sequence[int], mitigation: bool = False,
                epoch_merge: EpochMerge = EpochMerge.SUM) -> np.ndarray:
    """Window frequency estimate per key."""
    per_epoch = estimate_matrix(store, fingerprints, paths, epochs, mitigation)
    total = per_epoch.sum(axis=1)
    return total if EpochMerge(epoch_merge) is EpochMerge.SUM else total / len(epochs)


def heavy_hitters(store: RecordStore, fingerprints: np.ndarray, paths: Sequence[Sequence[str]],
                  epochs: Sequence[int], threshold: float, mitigation: bool = False) -> np.ndarray:
    """Indices of candidate keys whose window estimate reaches ``threshold``."""
    est = frequencies(store, fingerprints, paths, epochs, mitigation)
    return np.flatnonzero(est >= threshold)


# -- entropy -------------------------------------------------------------------------


def _g(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    out = np.zeros_like(x)
    out[pos] = x[pos] * np.log2(x[pos])
    return out


def univmon_entropy(level_estimates: list[np.ndarray], levels_of_key: np.ndarray, total: float,
                    top_k: int = 32) -> float:
    """Entropy from per-level frequency estimates with the UnivMon recursion.

    ``level_estimates[l]`` holds the level-``l`` estimate for every key (NaN
    for keys not sampled into level ``l``); ``levels_of_key`` is each key's
    top level. Heavy keys per level are the ``top_k`` largest estimates.
    """
    L = len(level_estimates)
    if total <= 0:
        return 0.0
    Y = 0.0
    for lvl in range(L - 1, -1, -1):
        members = np.flatnonzero(levels_of_key >= lvl)
        est = level_estimates[lvl][members]
        if len(members) > top_k:
            pick = np.argpartition(-est, top_k - 1)[:top_k]
            members, est = members[pick], est[pick]
        deeper = (levels_of_key[members] >= lvl + 1) & (lvl + 1 < L)
        Y = 2 * Y + float(np.sum((1 - 2 * deeper) * _g(est)))
    return float(math.log2(total) - Y / total)


def entropy_estimate(store: RecordStore, fingerprints: np.ndarray, paths: Sequence[Sequence[str]],
                     epochs: Sequence[int], top_k: int = 32, mitigation: bool = False,
                     per_epoch: bool = False):
    """Window entropy (bits) of the candidate keys' traffic, averaged over epochs."""
    fingerprints = np.asarray(fingerprints, dtype=np.uint64)
    if len(fingerprints) == 0:
        raise QueryError("no candidate keys")
    values = []
    layout = PathLayout.build(paths, mitigation)
    for e in epochs:
        first = store.get(paths[0][0], e, 0)
        if first.kind is not SketchKind.UM:
            raise UnsupportedQueryError("entropy needs a UnivMon deployment")
        L = store.block(paths[0][0], e).shape[1]
        lvl_seed = first.seeds.level_seed
        top = np.minimum(hash_level(lvl_seed, fingerprints, L), L - 1)
        ests = []
        for lvl in range(L):
            act = (top >= lvl)[:, None]
            if not act.any():
                ests.append(np.full(len(fingerprints), np.nan))
                continue
            ests.append(estimate_matrix(store, fingerprints, paths, [e], mitigation, lvl, act,
                                        layout=layout)[:, 0])
        total = float(np.sum(ests[0]))
        values.append(univmon_entropy(ests, top, total, top_k))
    return values if per_epoch else float(np.mean(values))


def exact_entropy(counts: np.ndarray) -> float:
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    m = c.sum()
    if m == 0:
        return 0.0
    p = c / m
    return float(-(p * np.log2(p)).sum())
