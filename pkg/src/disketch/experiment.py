"""Experiment orchestration: scenarios, systems, calibration, sweeps and reports."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .baselines import aggregated_matrix, disco_config, disco_matrix, replay_aggregated
from .fragment import Adaptation, ExportMode, FragmentConfig, fragment_seed
from .metrics import MetricsReport, evaluate
from .network import (
    Topology,
    build_path,
    build_spine_leaf,
    fat_tree_preset,
    gen_load_shares,
    gen_memory_distribution,
    gini,
    cov,
)
from .query import entropy_estimate, estimate_matrix, exact_entropy
from .records import RecordStore, save_store
from .sketch import DEFAULT_LEVELS, SketchKind, mix64
from .workload import (
    FIVE_TUPLE,
    SRC_IP,
    GroundTruth,
    PathTable,
    Trace,
    gen_zipf_trace,
    ground_truth,
    replay,
    route_trace,
)


class ExperimentError(ValueError):
    pass


class Scenario(str, enum.Enum):
    FAT_TREE_HOMOG = "fat_tree_homog"
    FAT_TREE_HETERO = "fat_tree_hetero"
    SPINE_LEAF_HOMOG = "spine_leaf_homog"
    SPINE_LEAF_HETERO = "spine_leaf_hetero"
    SINGLE_PATH_COV = "single_path_cov"


class System(str, enum.Enum):
    AGGREGATED = "aggregated"
    DISCO = "disco"
    DISKETCH = "disketch"


KEY_FIELDS = {"five_tuple": FIVE_TUPLE, "src_ip": SRC_IP}


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: Scenario = Scenario.FAT_TREE_HETERO
    sketch_kind: SketchKind = SketchKind.CS
    system: System = System.DISKETCH
    base_memory_bytes: int = 32 * 1024
    gini: float | None = None  # None: 0.4 for hetero scenarios, 0 otherwise
    width_cov: float = 0.0
    load_cov: float = 0.0
    rho_target: float | None = None  # None: calibrate
    epochs: int = 32
    epoch_ticks: int = 1 << 20
    num_packets: int = 200_000
    num_flows: int = 20_000
    zipf_s: float = 1.0
    burstiness: float = 0.0
    arrivals: str = "paced"
    key_fields: str = "five_tuple"
    seed: int = 0
    calibration_seed: int = 10_007
    mitigation: bool = False
    path_filter: str = "all"  # "all", "full" or a path length
    rows: int = 3
    levels: int = DEFAULT_LEVELS
    max_subepochs: int = 256
    adaptation: Adaptation = Adaptation.MOVING
    export_mode: ExportMode = ExportMode.RESET
    hh_fraction: float = 1e-4
    top_k: int = 32
    path_counters: int = 5120
    background_packets: int = 259_000
    eval_flows: int = 300
    eval_fraction: float = 0.01
    byte_weighted: bool = False

    def __post_init__(self):
        for name, cls in (("scenario", Scenario), ("sketch_kind", SketchKind), ("system", System),
                          ("adaptation", Adaptation), ("export_mode", ExportMode)):
            object.__setattr__(self, name, cls(getattr(self, name)))
        if self.key_fields not in KEY_FIELDS:
            raise ExperimentError(f"key_fields must be one of {sorted(KEY_FIELDS)}")
        if self.epochs < 1 or self.num_packets < 1 or self.num_flows < 1:
            raise ExperimentError("epochs, num_packets and num_flows must be positive")
        if self.base_memory_bytes < 8:
            raise ExperimentError("base_memory_bytes must be >= 8")
        if self.rho_target is not None and self.rho_target <= 0:
            raise ExperimentError("rho_target must be positive")
        if self.path_filter not in ("all", "full") and not str(self.path_filter).isdigit():
            raise ExperimentError("path_filter must be 'all', 'full' or an integer length")
        if self.scenario is Scenario.SINGLE_PATH_COV:
            if self.system is System.AGGREGATED:
                raise ExperimentError("the single-path scenario has no core switch for an aggregated sketch")
            if not (0 <= self.width_cov <= 1.8 and 0 <= self.load_cov <= 1.8):
                raise ExperimentError("CoV targets must be in [0, 1.8]")
            if not 0 < self.eval_fraction < 1:
                raise ExperimentError("eval_fraction must be in (0, 1)")
        if self.gini is not None and not 0 <= self.gini < 0.7:
            raise ExperimentError("gini must be in [0, 0.7)")

    @property
    def memory_gini(self) -> float:
        if self.gini is not None:
            return self.gini
        return 0.4 if self.scenario in (Scenario.FAT_TREE_HETERO, Scenario.SPINE_LEAF_HETERO) else 0.0

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else v
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ExperimentError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)


# -- inputs ----------------------------------------------------------------------------


@dataclass
class Inputs:
    topology: Topology
    trace: Trace
    paths: PathTable
    truth: GroundTruth
    info: dict = field(default_factory=dict)


def _min_memory(kind: SketchKind, levels: int) -> int:
    return 8 * levels if kind is SketchKind.UM else 8


def _gen_single_path_trace(cfg: ExperimentConfig, loads: Sequence[int], hops: int) -> tuple[Trace, PathTable]:
    """Five single-node background streams plus one end-to-end evaluation stream."""
    duration = cfg.epochs * cfg.epoch_ticks
    bg_total = sum(loads)
    eval_packets = max(1, round(bg_total * cfg.eval_fraction / (1 - cfg.eval_fraction)))
    streams = [(eval_packets, cfg.eval_flows, tuple(f"p{i}" for i in range(hops)))]
    for i, load in enumerate(loads):
        if load > 0:
            flows = max(1, round(cfg.num_flows * load / bg_total))
            streams.append((int(load), flows, (f"p{i}",)))
    ts, hdr, sizes, stream_of = [], [], [], []
    for sid, (packets, flows, _) in enumerate(streams):
        t = gen_zipf_trace(packets, flows, cfg.zipf_s, duration, cfg.burstiness,
                           seed=mix64(cfg.seed, 0x5A7B, sid), key_fields=KEY_FIELDS[cfg.key_fields],
                           arrivals=cfg.arrivals)
        h = t.headers.copy()
        h[:, 4] = sid  # dport tags the stream so keys never cross streams
        ts.append(t.timestamps)
        hdr.append(h)
        sizes.append(t.sizes)
        stream_of.append(np.full(len(t), sid))
    ts, hdr, sizes, stream_of = map(np.concatenate, (ts, hdr, sizes, stream_of))
    order = np.argsort(ts, kind="stable")
    trace = Trace(ts[order], hdr[order], sizes[order], KEY_FIELDS[cfg.key_fields])
    _, first = np.unique(trace.key_index, return_index=True)
    sid_sorted = stream_of[order]
    paths = PathTable([streams[int(sid_sorted[p])][2] for p in first])
    return trace, paths


def build_inputs(cfg: ExperimentConfig) -> Inputs:
    """Topology with per-switch memory, routed trace and ground truth for one seed."""
    kind = cfg.sketch_kind
    info: dict = {}
    if cfg.scenario is Scenario.SINGLE_PATH_COV:
        hops = 5
        topo = build_path(hops)
        counters = gen_load_shares(hops, cfg.path_counters, cfg.width_cov, seed=mix64(cfg.seed, 0x3D1), min_value=1)
        per_counter = 8 * (cfg.levels if kind is SketchKind.UM else 1)
        topo = topo.with_memory([c * per_counter for c in counters])
        loads = gen_load_shares(hops, cfg.background_packets, cfg.load_cov, seed=mix64(cfg.seed, 0x10AD))
        trace, paths = _gen_single_path_trace(cfg, loads, hops)
        info.update(widths=counters, width_cov=cov(counters), loads=loads, load_cov=cov(loads))
    else:
        if cfg.scenario in (Scenario.FAT_TREE_HOMOG, Scenario.FAT_TREE_HETERO):
            topo = fat_tree_preset()
        else:
            topo = build_spine_leaf()
        mem = gen_memory_distribution(len(topo.switches), cfg.base_memory_bytes, cfg.memory_gini,
                                      seed=mix64(cfg.seed, 0x3E3), min_bytes=_min_memory(kind, cfg.levels))
        topo = topo.with_memory(mem)
        raw = gen_zipf_trace(cfg.num_packets, cfg.num_flows, cfg.zipf_s, cfg.epochs * cfg.epoch_ticks,
                             cfg.burstiness, seed=mix64(cfg.seed, 0x7EACE), key_fields=KEY_FIELDS[cfg.key_fields],
                             arrivals=cfg.arrivals)
        trace, paths = route_trace(raw, topo, seed=cfg.seed)
        info.update(memory=topo.memory(), memory_gini=gini(mem), dropped_packets=len(raw) - len(trace),
                    dropped_keys=raw.num_keys - trace.num_keys)
    weights = trace.sizes if cfg.byte_weighted else None
    truth = ground_truth(trace, paths, cfg.epochs, cfg.epoch_ticks, weights)
    info.update(topology=topo.name, packets=len(trace), keys=trace.num_keys)
    return Inputs(topo, trace, paths, truth, info)


# -- systems -----------------------------------------------------------------------------


def fragment_configs(cfg: ExperimentConfig, topology: Topology, rho_target: float) -> dict[str, FragmentConfig]:
    level_seed = mix64(cfg.seed, 0x1E7E1)
    frags = {}
    for sw, mem in topology.memory().items():
        fc = FragmentConfig(
            sw, cfg.sketch_kind, mem, rho_target,
            epoch_duration_ticks=cfg.epoch_ticks,
            max_subepochs=cfg.max_subepochs,
            single_hop_mitigation=cfg.mitigation,
            export_mode=cfg.export_mode,
            seed=fragment_seed(cfg.seed, sw),
            level_seed=level_seed,
            levels=cfg.levels,
            adaptation=cfg.adaptation,
        )
        frags[sw] = disco_config(fc) if cfg.system is System.DISCO else fc
    return frags


@dataclass
class SystemRun:
    system: System
    estimates: np.ndarray  # (keys, epochs)
    store: RecordStore
    n_history: dict[str, list[int]] = field(default_factory=dict)
    rho_history: dict[str, list[float]] = field(default_factory=dict)
    entropy: float | None = None


def run_system(cfg: ExperimentConfig, inputs: Inputs, rho_target: float | None = None,
               queries: bool = True) -> SystemRun:
    """Deploy one system, replay, and estimate every evaluated key (others stay NaN)."""
    epochs = range(cfg.epochs)
    fps_all = inputs.trace.fingerprints
    keep = np.flatnonzero(eval_mask(cfg, inputs)) if queries else np.zeros(0, dtype=np.int64)
    fps = fps_all[keep]
    paths = [inputs.paths[k] for k in keep]
    est = np.full((len(fps_all), cfg.epochs), np.nan)
    if cfg.system is System.AGGREGATED:
        cores = inputs.topology.cores()
        dep = replay_aggregated(inputs.trace, inputs.paths, inputs.topology, cfg.sketch_kind,
                                {c: inputs.topology.switches[c].memory_bytes for c in cores}, cfg.seed,
                                cfg.epochs, cfg.epoch_ticks, cfg.rows, mix64(cfg.seed, 0x1E7E1),
                                cfg.byte_weighted)
        est[keep] = aggregated_matrix(replace_rows(dep, keep), fps, epochs)
        return SystemRun(cfg.system, est, dep.store)
    rho = rho_target if rho_target is not None else (cfg.rho_target or 1.0)
    res = replay(inputs.trace, inputs.paths, fragment_configs(cfg, inputs.topology, rho), cfg.epochs,
                 cfg.byte_weighted)
    if len(keep):
        if cfg.system is System.DISCO:
            est[keep] = disco_matrix(res.store, fps, paths, epochs)
        else:
            est[keep] = estimate_matrix(res.store, fps, paths, epochs, cfg.mitigation)
    run = SystemRun(cfg.system, est, res.store, res.n_history, res.rho_history)
    if queries and cfg.sketch_kind is SketchKind.UM:
        run.entropy = entropy_estimate(res.store, fps_all, inputs.paths.paths, epochs, cfg.top_k, cfg.mitigation)
    return run


def replace_rows(dep, keep):
    return replace(dep, row_paths=[dep.row_paths[k] for k in keep])


def eval_mask(cfg: ExperimentConfig, inputs: Inputs) -> np.ndarray:
    lengths = inputs.paths.lengths
    if cfg.path_filter == "all":
        return np.ones(len(lengths), dtype=bool)
    if cfg.path_filter == "full":
        return lengths == lengths.max()
    return lengths == int(cfg.path_filter)


def true_entropy(truth: GroundTruth) -> float:
    return float(np.mean([exact_entropy(truth.counts[:, e]) for e in range(truth.counts.shape[1])]))


def score(cfg: ExperimentConfig, inputs: Inputs, run: SystemRun) -> MetricsReport:
    mask = eval_mask(cfg, inputs) & ~np.isnan(run.estimates).any(axis=1)
    total = inputs.truth.total
    rep = evaluate(run.system.value, run.estimates[mask].sum(axis=1), inputs.truth.totals[mask],
                   inputs.paths.lengths[mask], total, cfg.hh_fraction * total)
    if run.entropy is not None:
        rep.entropy_estimate = run.entropy
        rep.entropy_true = true_entropy(inputs.truth)
    return rep


# -- calibration ------------------------------------------------------------------------


@dataclass
class Calibration:
    rho_target: float
    base_rho: float
    candidates: list[tuple[float, float]]  # (rho, rmse)


def single_row_rho(cfg: ExperimentConfig, inputs: Inputs) -> float:
    """Median over fragments of the epoch-mean single-row error estimate."""
    run = run_system(replace(cfg, system=System.DISCO), inputs, rho_target=1.0, queries=False)
    per_frag = [float(np.mean(v)) for v in run.rho_history.values()]
    return float(np.median(per_frag))


def homogeneous_rho(cfg: ExperimentConfig) -> float:
    """Single-row estimate of the same workload with every switch at base memory."""
    homog = replace(cfg, gini=0.0, width_cov=0.0)
    return single_row_rho(homog, build_inputs(homog))


def calibrate_rho(cfg: ExperimentConfig, exponents: Iterable[int] = range(-4, 5),
                  seed: int | None = None, metric: str = "rmse") -> Calibration:
    """Pick rho_target from powers of two around the homogeneous single-row estimate.

    The base is the median fragment's epoch-mean error estimate when every
    switch has the base memory and n = 1.
    Runs on ``cfg.calibration_seed`` (or ``seed``) so evaluation seeds stay
    untouched; the candidate with the lowest ``metric`` (a report column,
    RMSE by default) wins.
    """
    cal = replace(cfg, seed=cfg.calibration_seed if seed is None else seed, system=System.DISKETCH)
    inputs = build_inputs(cal)
    base = homogeneous_rho(cal)
    if base <= 0:
        base = 1.0
    table = []
    for k in exponents:
        rho = base * 2.0 ** k
        rep = score(cal, inputs, run_system(cal, inputs, rho))
        value = rep.row()[metric]
        if value is None:
            raise ExperimentError(f"metric {metric!r} is not available for this configuration")
        table.append((rho, float(value)))
    best = min(table, key=lambda t: (t[1], t[0]))
    return Calibration(best[0], base, table)


# -- single runs and sweeps -----------------------------------------------------------------


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: MetricsReport
    rho_target: float | None
    inputs: Inputs
    run: SystemRun
    metadata: dict


def resolve_rho(cfg: ExperimentConfig) -> float | None:
    if cfg.system is System.AGGREGATED:
        return None
    if cfg.system is System.DISCO:
        return cfg.rho_target or 1.0  # unused by pinned fragments
    return cfg.rho_target if cfg.rho_target is not None else calibrate_rho(cfg).rho_target


def metadata_for(cfg: ExperimentConfig, inputs: Inputs, rho: float | None) -> dict:
    return {
        "version": __version__,
        "config": cfg.to_dict(),
        "rho_target": rho,
        "inputs": {k: v for k, v in inputs.info.items()},
        "filters": {
            "path_filter": cfg.path_filter,
            "same_host_flows": "dropped",
            "aggregated_unmeasured": "keys crossing no core switch are excluded",
        },
        "hh_threshold_fraction": cfg.hh_fraction,
    }


def run_experiment(cfg: ExperimentConfig, inputs: Inputs | None = None) -> ExperimentResult:
    inputs = build_inputs(cfg) if inputs is None else inputs
    rho = resolve_rho(cfg)
    run = run_system(cfg, inputs, rho)
    rep = score(cfg, inputs, run)
    return ExperimentResult(cfg, rep, rho, inputs, run, metadata_for(cfg, inputs, rho))


SWEEPABLE = {"base_memory_bytes", "gini", "width_cov", "load_cov", "rho_target", "num_packets",
             "num_flows", "zipf_s", "burstiness", "arrivals", "epochs", "mitigation", "path_filter"}


@dataclass
class SweepRow:
    axis: str
    value: object
    seed: int
    system: str
    rho_target: float | None
    report: MetricsReport

    def flat(self) -> dict:
        d = {"axis": self.axis, "value": self.value, "seed": self.seed, "rho_target": self.rho_target}
        d.update(self.report.row())
        for s in self.report.by_length:
            d[f"rmse_len{s.path_length}"] = s.rmse
            d[f"aae_len{s.path_length}"] = s.aae
        return d


def sweep(cfg: ExperimentConfig, axis: str, values: Sequence, systems: Sequence[System] = (System.DISKETCH,),
          seeds: Sequence[int] = (0,), calibrate_each: bool = True) -> list[SweepRow]:
    """One report per (value, seed, system); all systems share each cell's inputs.

    DiSketch's rho_target is calibrated once per value on the calibration
    seed unless the config fixes it.
    """
    if axis not in SWEEPABLE:
        raise ExperimentError(f"{axis!r} is not sweepable; choose from {sorted(SWEEPABLE)}")
    rows = []
    for value in values:
        base = replace(cfg, **{axis: value})
        rho = base.rho_target
        if System.DISKETCH in systems and rho is None and calibrate_each:
            rho = calibrate_rho(base).rho_target
        for seed in seeds:
            cell = replace(base, seed=seed)
            inputs = build_inputs(cell)
            for system in systems:
                sc = replace(cell, system=System(system))
                r = rho if sc.system is System.DISKETCH else None
                run = run_system(sc, inputs, r)
                rows.append(SweepRow(axis, value, seed, sc.system.value, r, score(sc, inputs, run)))
    return rows


def median_by(rows: Sequence[SweepRow], metric: str) -> dict[tuple, float]:
    """Median of ``metric`` over seeds per (value, system)."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault((r.value, r.system), []).append(r.flat()[metric])
    return {k: float(np.median(v)) for k, v in groups.items()}


@dataclass
class CovCell:
    width_cov: float
    load_cov: float
    rho_target: float
    nrmse: dict[str, list[float]]  # system -> per seed

    @property
    def improvement(self) -> list[float]:
        """Per-seed log10(NRMSE_disco) - log10(NRMSE_disketch)."""
        return [math.log10(a) - math.log10(b) for a, b in zip(self.nrmse["disco"], self.nrmse["disketch"])]

    @property
    def median_improvement(self) -> float:
        return float(np.median(self.improvement))


def cov_grid(cfg: ExperimentConfig, width_covs: Sequence[float], load_covs: Sequence[float],
             seeds: Sequence[int]) -> list[CovCell]:
    """Cross width-CoV with load-CoV on the single path, DiSketch against DISCO."""
    base = replace(cfg, scenario=Scenario.SINGLE_PATH_COV, path_filter="full")
    cells = []
    for wc in width_covs:
        for lc in load_covs:
            cell_cfg = replace(base, width_cov=wc, load_cov=lc)
            rho = cell_cfg.rho_target or calibrate_rho(cell_cfg).rho_target
            nr: dict[str, list[float]] = {"disco": [], "disketch": []}
            for seed in seeds:
                sc = replace(cell_cfg, seed=seed)
                inputs = build_inputs(sc)
                for system in (System.DISCO, System.DISKETCH):
                    s2 = replace(sc, system=system)
                    nr[system.value].append(score(s2, inputs, run_system(s2, inputs, rho)).nrmse)
            cells.append(CovCell(wc, lc, rho, nr))
    return cells


# -- reports -----------------------------------------------------------------------------------

METRIC_COLUMNS = ["system", "keys", "total_packets", "aae", "rmse", "nrmse", "hh_threshold", "f1",
                  "entropy_true", "entropy_estimate", "entropy_abs_error", "entropy_rel_error"]


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> None:
    if columns is None:
        columns = []
        for r in rows:
            for k in r:
                if k not in columns:
                    columns.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in columns})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """Metrics table with a stable column order; an empty list gives a header-only file."""
    write_csv(path, [r.row() for r in reports], METRIC_COLUMNS)


def write_result(result: ExperimentResult, out: str | Path, records: bool = True) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sysname = result.config.system.value
    report([result.report], out / f"metrics_{sysname}.csv")
    write_csv(out / f"by_length_{sysname}.csv", [asdict(s) for s in result.report.by_length],
              ["path_length", "keys", "aae", "rmse", "median_abs_error"])
    tr = result.inputs.truth
    est = result.run.estimates.sum(axis=1)
    write_csv(out / f"per_key_{sysname}.csv", [
        {"key": int(fp), "path_length": int(pl), "truth": int(t), "estimate": float(e), "error": float(e - t)}
        for fp, pl, t, e in zip(result.inputs.trace.fingerprints, tr.path_lengths, tr.totals, est)
    ], ["key", "path_length", "truth", "estimate", "error"])
    write_csv(out / "ground_truth.csv", [
        {"key": int(fp), "path_length": int(pl), "path": ",".join(path),
         **{f"e{i}": int(c) for i, c in enumerate(row)}}
        for fp, pl, path, row in zip(result.inputs.trace.fingerprints, tr.path_lengths,
                                     result.inputs.paths.paths, tr.counts)
    ])
    if records:
        save_store(out / f"records_{sysname}.jsonl", result.run.store)
    meta = dict(result.metadata)
    meta["n_history"] = result.run.n_history
    (out / f"metadata_{sysname}.json").write_text(json.dumps(meta, indent=1, default=_jsonable))
    return out


def write_sweep(rows: Sequence[SweepRow], path: str | Path) -> None:
    write_csv(path, [r.flat() for r in rows])


def write_cov_grid(cells: Sequence[CovCell], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "cov_grid.csv", [
        {"width_cov": c.width_cov, "load_cov": c.load_cov, "rho_target": c.rho_target,
         "log10_nrmse_disco": float(np.median(np.log10(c.nrmse["disco"]))),
         "log10_nrmse_disketch": float(np.median(np.log10(c.nrmse["disketch"])))}
        for c in cells
    ])
    write_csv(out / "cov_improvement.csv", [
        {"width_cov": c.width_cov, "load_cov": c.load_cov, "improvement": c.median_improvement} for c in cells
    ])


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
