"""Comparison systems: DISCO-style per-row disaggregation and an aggregated sketch.

DISCO places one full-memory row per switch and never subdivides the epoch,
so it is a fragment pinned at ``n = 1`` with mitigation off. Its query takes
the min (CMS) or median (CS) of the on-path rows' raw estimates and has its
own implementation here, independent of the subepoch grid, so the two can
be checked against each other.

The aggregated baseline keeps a ``d``-row sketch on every core switch. Each
flow is counted once, at the first core switch on its path.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .fragment import Adaptation, FragmentConfig, epoch_seeds, fragment_seed
from .network import Tier, Topology
from .query import PathResolutionError, QueryError, median, record_estimate
from .records import NotReadyError, RecordStore, SubepochRecord
from .sketch import CountMinRow, CountRow, LevelStack, SketchKind, hash_index, hash_sign, level_seeds
from .workload import PathTable, Trace, _check_window, replay_fragment

DEFAULT_ROWS = 3


def disco_config(cfg: FragmentConfig) -> FragmentConfig:
    """The DISCO fragment equivalent of ``cfg``: n pinned at 1, no mitigation."""
    return replace(cfg, adaptation=Adaptation.FIXED, initial_subepochs=1, single_hop_mitigation=False)


def disco_query(records: Sequence[SubepochRecord], fingerprint: int, level: int = 0) -> float:
    """Min/median over the on-path rows' raw full-epoch estimates."""
    if not records:
        raise PathResolutionError("empty path")
    if any(r.n != 1 for r in records):
        raise QueryError("DISCO records cover whole epochs (n = 1)")
    vals = [record_estimate(r, fingerprint, level) for r in records]
    return min(vals) if records[0].kind is SketchKind.CMS else median(vals)


def disco_matrix(store: RecordStore, fingerprints: np.ndarray, paths: Sequence[Sequence[str]],
                 epochs: Sequence[int], level: int = 0) -> np.ndarray:
    """Batched DISCO estimates, shape ``(keys, epochs)``."""
    if not store.sealed:
        raise NotReadyError("record store is not sealed")
    if any(len(p) == 0 for p in paths):
        raise PathResolutionError("empty path")
    fps = np.asarray(fingerprints, dtype=np.uint64)
    H = max((len(p) for p in paths), default=1)
    out = np.empty((len(fps), len(epochs)))
    frags = sorted({f for p in paths for f in p})
    members = {f: ([], []) for f in frags}
    for k, p in enumerate(paths):
        for j, f in enumerate(p):
            members[f][0].append(k)
            members[f][1].append(j)
    for col, e in enumerate(epochs):
        raw = np.full((len(fps), H), np.nan)
        kind = None
        for f in frags:
            ks, js = np.array(members[f][0]), np.array(members[f][1])
            rec = store.get(f, e, 0)
            if rec.n != 1:
                raise QueryError(f"fragment {f} has n={rec.n} in epoch {e}; DISCO needs n = 1")
            kind = rec.kind
            sd = rec.seeds
            if kind is SketchKind.CMS:
                raw[ks, js] = rec.counters[hash_index(sd.index_seed, fps[ks], rec.width)]
            elif kind is SketchKind.CS:
                raw[ks, js] = hash_sign(sd.sign_seed, fps[ks]) * rec.counters[hash_index(sd.index_seed, fps[ks], rec.width)]
            else:
                iseed, sseed = level_seeds(sd.index_seed, sd.sign_seed, level)
                raw[ks, js] = hash_sign(sseed, fps[ks]) * rec.counters[level][hash_index(iseed, fps[ks], rec.width)]
        if kind is SketchKind.CMS:
            out[:, col] = np.nanmin(raw, axis=1)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                out[:, col] = np.nanmedian(raw, axis=1)
    return out


# -- aggregated sketch ---------------------------------------------------------------


def row_id(core: str, row: int) -> str:
    return f"{core}#r{row}"


def aggregated_row_configs(core: str, kind: SketchKind, memory_bytes: int, run_seed: int,
                           rows: int = DEFAULT_ROWS, level_seed: int = 0,
                           epoch_ticks: int = 1 << 20, **kw) -> list[FragmentConfig]:
    """One n=1 row config per sketch row; each row gets ``memory / d`` bytes."""
    if rows < 1:
        raise ValueError("rows must be >= 1")
    return [
        FragmentConfig(row_id(core, i), kind, memory_bytes // rows, rho_target=1.0,
                       epoch_duration_ticks=epoch_ticks, adaptation=Adaptation.FIXED,
                       seed=fragment_seed(run_seed, row_id(core, i)), level_seed=level_seed, **kw)
        for i in range(rows)
    ]


@dataclass
class AggregatedSketch:
    """A conventional ``d``-row sketch living on one switch."""

    rows_cfg: list[FragmentConfig]
    epoch: int = 0
    rows: list = field(init=False)

    def __post_init__(self):
        self._build()

    def _build(self):
        self.rows = []
        for cfg in self.rows_cfg:
            sd = epoch_seeds(cfg, self.epoch)
            if cfg.sketch_kind is SketchKind.CMS:
                self.rows.append(CountMinRow(cfg.width, sd.index_seed))
            elif cfg.sketch_kind is SketchKind.CS:
                self.rows.append(CountRow(cfg.width, sd.index_seed, sd.sign_seed))
            else:
                self.rows.append(LevelStack(cfg.width, sd.index_seed, sd.sign_seed, sd.level_seed, cfg.levels))

    @property
    def kind(self) -> SketchKind:
        return self.rows_cfg[0].sketch_kind

    def update(self, fingerprint: int, weight: int = 1) -> None:
        for r in self.rows:
            r.update(fingerprint, weight)

    def query(self, fingerprint: int, level: int = 0) -> float:
        if self.kind is SketchKind.UM:
            vals = [r.query(fingerprint, level) for r in self.rows]
        else:
            vals = [r.query(fingerprint) for r in self.rows]
        return min(vals) if self.kind is SketchKind.CMS else median(vals)

    def export(self) -> list[SubepochRecord]:
        """Close the epoch: one ``n = 1`` record per row, then start afresh."""
        out = []
        for cfg, r in zip(self.rows_cfg, self.rows):
            out.append(SubepochRecord(cfg.fragment_id, self.epoch, 0, 1, cfg.width, cfg.sketch_kind,
                                      epoch_seeds(cfg, self.epoch), np.array(r.counters, copy=True)))
        self.epoch += 1
        self._build()
        return out


def aggregated_query(records: Sequence[SubepochRecord], fingerprint: int, level: int = 0) -> float:
    """Min/median over the rows of one aggregated sketch for one epoch."""
    if not records:
        raise QueryError("no rows")
    vals = [record_estimate(r, fingerprint, level) for r in records]
    return min(vals) if records[0].kind is SketchKind.CMS else median(vals)


def first_core(path: Sequence[str], topology: Topology) -> str | None:
    for sw in path:
        if topology.tier_of(sw) is Tier.CORE:
            return sw
    return None


@dataclass
class AggregatedDeployment:
    store: RecordStore
    row_paths: list[tuple[str, ...] | None]  # per key: the rows of its first core, None if no core
    updates: dict[str, int]


def replay_aggregated(trace: Trace, paths: PathTable, topology: Topology, kind: SketchKind,
                      memory: Mapping[str, int], run_seed: int, epochs: int, epoch_ticks: int,
                      rows: int = DEFAULT_ROWS, level_seed: int = 0,
                      byte_weighted: bool = False) -> AggregatedDeployment:
    """Replay a trace into aggregated sketches on every core switch.

    ``memory`` gives each core switch's budget. A key is counted only at the
    first core on its path; keys that cross no core are not measured.
    """
    _check_window(trace, epochs, epoch_ticks)
    cores = topology.cores()
    core_of = [first_core(p, topology) for p in paths.paths]
    weights = trace.sizes if byte_weighted else np.ones(len(trace), dtype=np.int64)
    fps = trace.fingerprints[trace.key_index] if len(trace) else np.zeros(0, dtype=np.uint64)
    store = RecordStore()
    updates = {}
    row_paths: list = [None] * len(paths)
    for c in cores:
        cfgs = aggregated_row_configs(c, kind, memory[c], run_seed, rows, level_seed, epoch_ticks)
        on = np.array([co == c for co in core_of], dtype=bool)
        for k in np.flatnonzero(on):
            row_paths[k] = tuple(cfg.fragment_id for cfg in cfgs)
        idx = np.flatnonzero(on[trace.key_index]) if len(trace) else np.zeros(0, dtype=np.int64)
        no_single = np.zeros(len(idx), dtype=bool)
        for cfg in cfgs:
            _, _, updates[cfg.fragment_id] = replay_fragment(
                cfg, trace.timestamps[idx], fps[idx], no_single, weights[idx], epochs, store)
    store.seal()
    return AggregatedDeployment(store, row_paths, updates)


def aggregated_matrix(dep: AggregatedDeployment, fingerprints: np.ndarray, epochs: Sequence[int],
                      level: int = 0) -> np.ndarray:
    """Per-epoch aggregated estimates; keys without a core get NaN."""
    fps = np.asarray(fingerprints, dtype=np.uint64)
    out = np.full((len(fps), len(epochs)), np.nan)
    have = [k for k, p in enumerate(dep.row_paths) if p is not None]
    if have:
        out[have] = disco_matrix(dep.store, fps[have], [dep.row_paths[k] for k in have], epochs, level)
    return out


__all__ = [
    "AggregatedDeployment",
    "AggregatedSketch",
    "aggregated_matrix",
    "aggregated_query",
    "aggregated_row_configs",
    "disco_config",
    "disco_matrix",
    "disco_query",
    "first_core",
    "replay_aggregated",
]
