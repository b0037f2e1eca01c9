"""Packet traces, synthetic workloads, flow routing and chronological replay.

Traces are kept columnar (numpy arrays, one entry per packet). The trace
file format is comma separated, one packet per line::

    timestamp_ticks,src_addr,dst_addr,proto,src_port,dst_port,size_bytes

Addresses may be dotted IPv4 or plain integers. Lines starting with ``#``
are comments.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .fragment import (
    Fragment,
    FragmentConfig,
    epoch_seeds,
    next_subepoch_count,
    subepoch_rho_hat,
)
from .network import Topology, route
from .records import RecordStore
from .sketch import (
    FlowKey,
    SketchKind,
    hash_index,
    hash_level,
    hash_sign,
    key_fingerprint,
    level_seeds,
)

HEADER_FIELDS = ("src", "dst", "proto", "sport", "dport")
FIVE_TUPLE = HEADER_FIELDS
SRC_IP = ("src",)
DEFAULT_EPOCH_TICKS = 1 << 20
DEFAULT_EPOCHS = 32
ARRIVALS = ("paced", "poisson")


class TraceError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class ReplayError(RuntimeError):
    pass


@dataclass(frozen=True)
class Packet:
    timestamp: int
    key: FlowKey
    size_bytes: int


@dataclass
class Trace:
    """Columnar packet trace.

    ``headers`` holds the five header fields per packet; the measured key is
    the projection onto ``key_fields``. ``key_index`` maps each packet to a
    row of ``keys``.
    """

    timestamps: np.ndarray
    headers: np.ndarray
    sizes: np.ndarray
    key_fields: tuple[str, ...] = FIVE_TUPLE
    keys: list[FlowKey] = field(init=False)
    key_index: np.ndarray = field(init=False)
    fingerprints: np.ndarray = field(init=False)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.headers = np.asarray(self.headers, dtype=np.int64).reshape(-1, len(HEADER_FIELDS))
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if np.any(np.diff(self.timestamps) < 0):
            raise TraceError("timestamps must be non-decreasing")
        cols = [HEADER_FIELDS.index(f) for f in self.key_fields]
        proj = self.headers[:, cols]
        if len(proj):
            uniq, first, inv = np.unique(proj, axis=0, return_index=True, return_inverse=True)
            # keys ordered by first appearance
            order = np.argsort(first, kind="stable")
            rank = np.empty_like(order)
            rank[order] = np.arange(len(order))
            self.keys = [tuple(int(v) for v in uniq[i]) for i in order]
            self.key_index = rank[inv.reshape(-1)]
        else:
            self.keys = []
            self.key_index = np.zeros(0, dtype=np.int64)
        self.fingerprints = np.array([key_fingerprint(k) for k in self.keys], dtype=np.uint64)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def num_keys(self) -> int:
        return len(self.keys)

    def packets(self) -> Iterator[Packet]:
        for t, k, s in zip(self.timestamps, self.key_index, self.sizes):
            yield Packet(int(t), self.keys[k], int(s))

    def subset(self, mask: np.ndarray) -> "Trace":
        return Trace(self.timestamps[mask], self.headers[mask], self.sizes[mask], self.key_fields)

    def rekey(self, key_fields: Sequence[str]) -> "Trace":
        return Trace(self.timestamps, self.headers, self.sizes, tuple(key_fields))


def _parse_addr(text: str) -> int:
    text = text.strip()
    if "." in text:
        return int(ipaddress.IPv4Address(text))
    return int(text)


def load_trace(path: str | Path, key_fields: Sequence[str] = FIVE_TUPLE) -> Trace:
    ts, hdr, sizes = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise TraceError(f"expected 7 fields, got {len(parts)}", lineno)
            try:
                t = int(parts[0])
                row = [_parse_addr(parts[1]), _parse_addr(parts[2]), int(parts[3]), int(parts[4]), int(parts[5])]
                size = int(parts[6])
            except ValueError as exc:
                raise TraceError(str(exc), lineno) from None
            if ts and t < ts[-1]:
                raise TraceError(f"timestamp {t} is earlier than the previous packet", lineno)
            ts.append(t)
            hdr.append(row)
            sizes.append(size)
    return Trace(np.array(ts, dtype=np.int64), np.array(hdr, dtype=np.int64).reshape(-1, 5),
                 np.array(sizes, dtype=np.int64), tuple(key_fields))


def save_trace(path: str | Path, trace: Trace) -> None:
    with open(path, "w") as fh:
        fh.write("# timestamp_ticks,src_addr,dst_addr,proto,src_port,dst_port,size_bytes\n")
        for t, h, s in zip(trace.timestamps.tolist(), trace.headers.tolist(), trace.sizes.tolist()):
            src, dst = ipaddress.IPv4Address(h[0]), ipaddress.IPv4Address(h[1])
            fh.write(f"{t},{src},{dst},{h[2]},{h[3]},{h[4]},{s}\n")


def _distinct_ints(rng: np.random.Generator, count: int, low: int, high: int) -> np.ndarray:
    out = np.unique(rng.integers(low, high, size=count))
    while len(out) < count:
        out = np.unique(np.concatenate([out, rng.integers(low, high, size=count - len(out))]))
    return rng.permutation(out)


def _paced_times(rng: np.random.Generator, flow_of: np.ndarray, num_flows: int, duration: int) -> np.ndarray:
    # rank of every packet within its flow, flows in random slot order
    order = np.argsort(flow_of, kind="stable")
    sizes = np.bincount(flow_of, minlength=num_flows)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    rank = np.empty(len(flow_of), dtype=np.int64)
    rank[order] = np.arange(len(flow_of)) - np.repeat(starts, sizes)
    k = sizes[flow_of]
    slot = (rank + rng.random(len(flow_of))) / k
    return np.minimum((slot * duration).astype(np.int64), duration - 1)


def zipf_probabilities(num_flows: int, zipf_s: float) -> np.ndarray:
    weights = np.arange(1, num_flows + 1, dtype=np.float64) ** -zipf_s
    return weights / weights.sum()


def gen_zipf_trace(num_packets: int, num_flows: int, zipf_s: float = 1.0,
                   duration_ticks: int = DEFAULT_EPOCHS * DEFAULT_EPOCH_TICKS,
                   burstiness: float = 0.0, seed: int = 0,
                   key_fields: Sequence[str] = FIVE_TUPLE, arrivals: str = "paced") -> Trace:
    """Synthetic trace: Zipf flow sizes, uniform or bursty packet times.

    Packet times are uniform over the duration in both arrival models.
    ``"paced"`` spreads a flow's k packets one per k-th of the duration with
    uniform jitter inside each slot (a constant-rate sender);
    ``"poisson"`` draws every packet time independently.

    With ``burstiness`` b > 0 a fraction b of every flow's packets falls in
    a window of 1/64 of the duration around a per-flow burst centre.
    Every flow gets a distinct source address, so source-IP keying keeps
    flows apart.
    """
    if num_packets < 0 or num_flows < 1 or duration_ticks < 1 or zipf_s < 0:
        raise ValueError("invalid trace parameters")
    if not 0 <= burstiness <= 1:
        raise ValueError("burstiness must be in [0, 1]")
    if arrivals not in ARRIVALS:
        raise ValueError(f"arrivals must be one of {ARRIVALS}")
    rng = np.random.default_rng(seed)
    src = _distinct_ints(rng, num_flows, 1 << 24, 1 << 32)
    dst = rng.integers(1 << 24, 1 << 32, size=num_flows)
    proto = rng.choice(np.array([6, 17]), size=num_flows)
    sport = rng.integers(1024, 65536, size=num_flows)
    dport = rng.integers(1, 65536, size=num_flows)
    flow_headers = np.stack([src, dst, proto, sport, dport], axis=1)

    flow_of = rng.choice(num_flows, size=num_packets, p=zipf_probabilities(num_flows, zipf_s))
    if arrivals == "poisson":
        times = rng.integers(0, duration_ticks, size=num_packets)
    else:
        times = _paced_times(rng, flow_of, num_flows, duration_ticks)
    if burstiness > 0:
        bursty = rng.random(num_packets) < burstiness
        centre = rng.integers(0, duration_ticks, size=num_flows)
        spread = max(1, duration_ticks // 64)
        offset = rng.integers(-spread // 2, spread // 2 + 1, size=num_packets)
        burst_t = np.clip(centre[flow_of] + offset, 0, duration_ticks - 1)
        times = np.where(bursty, burst_t, times)
    order = np.argsort(times, kind="stable")
    sizes = rng.integers(64, 1501, size=num_packets)
    return Trace(times[order], flow_headers[flow_of[order]], sizes[order], tuple(key_fields))


@dataclass
class HostMapping:
    src_host: np.ndarray  # per packet, index into hosts
    dst_host: np.ndarray
    hosts: list[str]

    @property
    def keep(self) -> np.ndarray:
        return self.src_host != self.dst_host


def map_flows_to_hosts(trace: Trace, topology: Topology, seed: int) -> HostMapping:
    """Map every address uniformly at random to a host, consistently within a run."""
    hosts = topology.host_ids
    if len(hosts) < 2:
        raise ValueError("topology needs at least two hosts")
    rng = np.random.default_rng(seed)
    addrs = trace.headers[:, :2]
    uniq, inv = np.unique(addrs.reshape(-1), return_inverse=True)
    host_of = rng.integers(0, len(hosts), size=len(uniq))
    mapped = host_of[inv].reshape(-1, 2)
    return HostMapping(mapped[:, 0], mapped[:, 1], hosts)


@dataclass
class PathTable:
    """Ordered switch path per key of a trace."""

    paths: list[tuple[str, ...]]

    def __getitem__(self, key_idx: int) -> tuple[str, ...]:
        return self.paths[key_idx]

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([len(p) for p in self.paths], dtype=np.int64)


def route_trace(trace: Trace, topology: Topology, seed: int) -> tuple[Trace, PathTable]:
    """Host-map and route a trace.

    Each key is routed once, using the host pair of its first packet. Keys
    whose first packet maps source and destination to the same host are
    dropped, together with all their packets.
    """
    mapping = map_flows_to_hosts(trace, topology, seed)
    _, first = np.unique(trace.key_index, return_index=True)
    keep_key = mapping.src_host[first] != mapping.dst_host[first]
    kept = trace.subset(keep_key[trace.key_index])
    # first packets of kept keys, in the kept trace's key order
    old_for_new = np.flatnonzero(keep_key)
    paths = []
    for old in old_for_new:
        p = first[old]
        paths.append(tuple(route(topology, int(trace.fingerprints[old]),
                                 mapping.hosts[mapping.src_host[p]], mapping.hosts[mapping.dst_host[p]], seed)))
    # Trace re-derives key order by first appearance; dropping whole keys preserves it.
    return kept, PathTable(paths)


@dataclass
class GroundTruth:
    counts: np.ndarray  # (num_keys, epochs) exact per-epoch weight
    path_lengths: np.ndarray
    keys: list[FlowKey]

    @property
    def epoch_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def ground_truth(trace: Trace, paths: PathTable, epochs: int, epoch_ticks: int,
                 weights: np.ndarray | None = None) -> GroundTruth:
    w = np.ones(len(trace), dtype=np.int64) if weights is None else weights
    ep = trace.timestamps // epoch_ticks
    flat = trace.key_index * epochs + ep
    counts = np.bincount(flat, weights=w, minlength=trace.num_keys * epochs)
    return GroundTruth(counts.astype(np.int64).reshape(trace.num_keys, epochs), paths.lengths, list(trace.keys))


@dataclass
class ReplayResult:
    store: RecordStore
    truth: GroundTruth
    n_history: dict[str, list[int]]
    rho_history: dict[str, list[float]]
    updates: dict[str, int]


def _fragment_packets(trace: Trace, paths: PathTable, switch: str) -> np.ndarray:
    on = np.array([switch in p for p in paths.paths], dtype=bool)
    return np.flatnonzero(on[trace.key_index]) if len(trace) else np.zeros(0, dtype=np.int64)


def replay_fragment(cfg: FragmentConfig, timestamps: np.ndarray, fingerprints: np.ndarray,
                    single_hop: np.ndarray, weights: np.ndarray, epochs: int,
                    store: RecordStore) -> tuple[list[int], list[float], int]:
    """Vectorized replay of one fragment over ``epochs`` whole epochs.

    Produces exactly the records :class:`~disketch.fragment.Fragment` would.
    Delta export yields the same counter vectors as reset export, so both
    modes take this path.
    """
    T_e = cfg.epoch_duration_ticks
    kind = cfg.sketch_kind
    w = cfg.width
    L = cfg.levels
    n = cfg.initial_subepochs
    bounds = np.searchsorted(timestamps, np.arange(epochs + 1) * T_e)
    n_hist, rho_hist, updates = [], [], 0
    mitig = cfg.single_hop_mitigation
    for e in range(epochs):
        lo, hi = bounds[e], bounds[e + 1]
        ts = timestamps[lo:hi]
        fp = fingerprints[lo:hi]
        seeds = epoch_seeds(cfg, e)
        cur = (ts - e * T_e) // (T_e // n)
        s = hash_index(seeds.subepoch_seed, fp, n) if len(fp) else np.zeros(0, dtype=np.int64)
        sampled = cur == s
        if mitig and n >= 2:
            sampled |= single_hop[lo:hi] & (cur == (s + n // 2) % n)
        fp_s, cur_s, wt = fp[sampled], cur[sampled], weights[lo:hi][sampled]
        updates += int(sampled.sum())
        if kind is SketchKind.UM:
            block = np.zeros(n * L * w, dtype=np.float64)
            if len(fp_s):
                top = np.minimum(hash_level(seeds.level_seed, fp_s, L), L - 1)
                for lvl in range(L):
                    m = top >= lvl
                    if not m.any():
                        break
                    iseed, sseed = level_seeds(seeds.index_seed, seeds.sign_seed, lvl)
                    flat = cur_s[m] * (L * w) + lvl * w + hash_index(iseed, fp_s[m], w)
                    block += np.bincount(flat, weights=wt[m] * hash_sign(sseed, fp_s[m]), minlength=n * L * w)
            block = block.astype(np.int64).reshape(n, L, w)
        else:
            flat = cur_s * w + (hash_index(seeds.index_seed, fp_s, w) if len(fp_s) else 0)
            vals = wt if kind is SketchKind.CMS else wt * (hash_sign(seeds.sign_seed, fp_s) if len(fp_s) else 0)
            block = np.bincount(flat, weights=vals, minlength=n * w).astype(np.int64).reshape(n, w)
        store.add_block(cfg.fragment_id, e, kind, seeds, block)
        rho_sum = 0.0
        for sub in range(n):
            rho_sum += subepoch_rho_hat(block[sub], kind)
        mean_rho = rho_sum / n
        n_hist.append(n)
        rho_hist.append(mean_rho)
        n = next_subepoch_count(n, mean_rho, cfg.rho_target, cfg.max_subepochs, cfg.adaptation)
    return n_hist, rho_hist, updates


def _check_window(trace: Trace, epochs: int, epoch_ticks: int) -> None:
    if len(trace) and (trace.timestamps[0] < 0 or trace.timestamps[-1] >= epochs * epoch_ticks):
        raise ReplayError(f"packets outside the window [0, {epochs * epoch_ticks})")


def _epoch_ticks(fragments: Mapping[str, FragmentConfig]) -> int:
    ticks = {c.epoch_duration_ticks for c in fragments.values()}
    if len(ticks) != 1:
        raise ReplayError("all fragments must share one epoch duration")
    return ticks.pop()


def replay(trace: Trace, paths: PathTable, fragments: Mapping[str, FragmentConfig],
           epochs: int = DEFAULT_EPOCHS, byte_weighted: bool = False) -> ReplayResult:
    """Drive every on-path fragment with every packet, epoch by epoch.

    ``fragments`` maps switch id to that switch's fragment config; switches
    without an entry host no fragment. Returns a sealed record store.
    """
    if len(paths) != trace.num_keys:
        raise ReplayError("path table does not match the trace's key set")
    T_e = _epoch_ticks(fragments)
    _check_window(trace, epochs, T_e)
    weights = trace.sizes if byte_weighted else np.ones(len(trace), dtype=np.int64)
    single = (paths.lengths == 1)[trace.key_index] if len(trace) else np.zeros(0, dtype=bool)
    fps = trace.fingerprints[trace.key_index] if len(trace) else np.zeros(0, dtype=np.uint64)
    store = RecordStore()
    n_hist, rho_hist, updates = {}, {}, {}
    for sw, cfg in fragments.items():
        idx = _fragment_packets(trace, paths, sw)
        n_hist[sw], rho_hist[sw], updates[sw] = replay_fragment(
            cfg, trace.timestamps[idx], fps[idx], single[idx], weights[idx], epochs, store)
    store.seal()
    truth = ground_truth(trace, paths, epochs, T_e, weights)
    return ReplayResult(store, truth, n_hist, rho_hist, updates)


def replay_reference(trace: Trace, paths: PathTable, fragments: Mapping[str, FragmentConfig],
                     epochs: int = DEFAULT_EPOCHS, byte_weighted: bool = False) -> ReplayResult:
    """Packet-at-a-time replay through :class:`Fragment` objects (slow; for testing)."""
    T_e = _epoch_ticks(fragments)
    _check_window(trace, epochs, T_e)
    frags = {sw: Fragment(cfg) for sw, cfg in fragments.items()}
    store = RecordStore()
    updates = {sw: 0 for sw in frags}
    lengths = paths.lengths
    for t, k, size in zip(trace.timestamps.tolist(), trace.key_index.tolist(), trace.sizes.tolist()):
        fp = int(trace.fingerprints[k])
        for sw in paths[k]:
            frag = frags.get(sw)
            if frag is None:
                continue
            for rec in frag.advance_to(t):
                store.append(rec)
            updates[sw] += frag.process_packet(fp, t, bool(lengths[k] == 1), size if byte_weighted else 1)
    for frag in frags.values():
        for rec in frag.advance_to(epochs * T_e):
            store.append(rec)
    store.seal()
    weights = trace.sizes if byte_weighted else None
    truth = ground_truth(trace, paths, epochs, T_e, weights)
    return ReplayResult(store, truth, {sw: f.n_history for sw, f in frags.items()},
                        {sw: f.rho_history for sw, f in frags.items()}, updates)
