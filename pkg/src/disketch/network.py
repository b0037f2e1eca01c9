"""Topologies, per-flow routing and heterogeneity generators."""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import networkx as nx
import numpy as np
from scipy import stats

from .sketch import HashSeed, Purpose, hash_index, mix64


class TopologyError(ValueError):
    pass


class RoutingError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    """A heterogeneity target could not be met within the search budget."""


class Tier(str, enum.Enum):
    EDGE = "edge"
    AGGREGATE = "aggregate"
    CORE = "core"
    PATH_NODE = "path_node"


@dataclass(frozen=True)
class Switch:
    switch_id: str
    tier: Tier
    memory_bytes: int = 0


@dataclass
class Topology:
    name: str
    switches: dict[str, Switch]
    links: list[tuple[str, str]]
    hosts: dict[str, str]  # host id -> attached switch
    graph: nx.Graph = field(init=False, repr=False)

    def __post_init__(self):
        self.graph = nx.Graph()
        self.graph.add_nodes_from(self.switches)
        self.graph.add_edges_from(self.links)
        for host, sw in self.hosts.items():
            if sw not in self.switches:
                raise TopologyError(f"host {host} attached to unknown switch {sw}")
        self._paths = functools.lru_cache(maxsize=None)(self._equal_cost_paths)

    @property
    def switch_ids(self) -> list[str]:
        return list(self.switches)

    @property
    def host_ids(self) -> list[str]:
        return list(self.hosts)

    def tier_of(self, switch_id: str) -> Tier:
        return self.switches[switch_id].tier

    def cores(self) -> list[str]:
        return [s for s, sw in self.switches.items() if sw.tier is Tier.CORE]

    def memory(self) -> dict[str, int]:
        return {s: sw.memory_bytes for s, sw in self.switches.items()}

    def with_memory(self, memory: dict[str, int] | Sequence[int]) -> "Topology":
        if not isinstance(memory, dict):
            if len(memory) != len(self.switches):
                raise TopologyError("one memory value per switch is required")
            memory = dict(zip(self.switches, memory))
        sw = {s: replace(v, memory_bytes=int(memory[s])) for s, v in self.switches.items()}
        return Topology(self.name, sw, list(self.links), dict(self.hosts))

    def _equal_cost_paths(self, a: str, b: str) -> tuple[tuple[str, ...], ...]:
        try:
            paths = nx.all_shortest_paths(self.graph, a, b)
            return tuple(sorted(tuple(p) for p in paths))
        except nx.NetworkXNoPath:
            return ()

    def equal_cost_paths(self, a: str, b: str) -> tuple[tuple[str, ...], ...]:
        return self._paths(a, b)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "switches": [{"id": s.switch_id, "tier": s.tier.value, "memory_bytes": s.memory_bytes}
                         for s in self.switches.values()],
            "links": [list(link) for link in self.links],
            "hosts": self.hosts,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Topology":
        switches = {s["id"]: Switch(s["id"], Tier(s["tier"]), int(s["memory_bytes"])) for s in obj["switches"]}
        return cls(obj["name"], switches, [tuple(link) for link in obj["links"]], dict(obj["hosts"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def build_fat_tree(k: int = 4, core_count: int | None = None, hosts_per_edge: int | None = None,
                   memory_bytes: int = 0) -> Topology:
    """Fat-Tree with ``k`` pods of ``k/2`` edge and ``k/2`` aggregate switches.

    Aggregate switch ``j`` of every pod links to core group ``j``. ``k=4``
    with the default ``(k/2)^2 = 4`` cores is the 20-switch preset.
    """
    if k < 2 or k % 2:
        raise TopologyError("k must be an even integer >= 2")
    half = k // 2
    cores = half * half if core_count is None else core_count
    if cores < 1 or cores % half:
        raise TopologyError(f"core_count must be a positive multiple of {half}")
    hosts_per_edge = half if hosts_per_edge is None else hosts_per_edge
    per_group = cores // half
    switches: dict[str, Switch] = {}
    links: list[tuple[str, str]] = []
    hosts: dict[str, str] = {}
    for c in range(cores):
        switches[f"c{c}"] = Switch(f"c{c}", Tier.CORE, memory_bytes)
    for p in range(k):
        for j in range(half):
            agg = f"a{p}.{j}"
            switches[agg] = Switch(agg, Tier.AGGREGATE, memory_bytes)
            for c in range(j * per_group, (j + 1) * per_group):
                links.append((agg, f"c{c}"))
        for i in range(half):
            edge = f"e{p}.{i}"
            switches[edge] = Switch(edge, Tier.EDGE, memory_bytes)
            for j in range(half):
                links.append((edge, f"a{p}.{j}"))
            for h in range(hosts_per_edge):
                hosts[f"h{p}.{i}.{h}"] = edge
    return Topology(f"fat_tree_k{k}_c{cores}", switches, links, hosts)


def fat_tree_preset(memory_bytes: int = 0) -> Topology:
    return build_fat_tree(4, 4, memory_bytes=memory_bytes)


def build_spine_leaf(spines: int = 4, leaves: int = 8, hosts_per_leaf: int = 2,
                     memory_bytes: int = 0) -> Topology:
    if spines < 1 or leaves < 1 or hosts_per_leaf < 1:
        raise TopologyError("spines, leaves and hosts_per_leaf must be positive")
    switches: dict[str, Switch] = {}
    links = []
    hosts = {}
    for s in range(spines):
        switches[f"s{s}"] = Switch(f"s{s}", Tier.CORE, memory_bytes)
    for leaf in range(leaves):
        lid = f"l{leaf}"
        switches[lid] = Switch(lid, Tier.EDGE, memory_bytes)
        links.extend((lid, f"s{s}") for s in range(spines))
        for h in range(hosts_per_leaf):
            hosts[f"h{leaf}.{h}"] = lid
    return Topology(f"spine_leaf_{spines}x{leaves}", switches, links, hosts)


def build_path(hops: int = 5, memory_bytes: int = 0) -> Topology:
    """A chain of ``hops`` switches.

    Hosts ``src``/``dst`` sit at the two ends; every node ``i`` also has a
    pair ``bg{i}a``/``bg{i}b`` whose traffic crosses only that node.
    """
    if hops < 1:
        raise TopologyError("hops must be >= 1")
    ids = [f"p{i}" for i in range(hops)]
    switches = {s: Switch(s, Tier.PATH_NODE, memory_bytes) for s in ids}
    links = list(zip(ids, ids[1:]))
    hosts = {"src": ids[0], "dst": ids[-1]}
    for i, s in enumerate(ids):
        hosts[f"bg{i}a"] = s
        hosts[f"bg{i}b"] = s
    return Topology(f"path_{hops}", switches, links, hosts)


def route(topology: Topology, fingerprint: int, src_host: str, dst_host: str, seed: int = 0) -> list[str]:
    """Shortest switch path for a flow; ties broken by a seeded hash of the key."""
    try:
        a, b = topology.hosts[src_host], topology.hosts[dst_host]
    except KeyError as exc:
        raise RoutingError(f"unknown host {exc.args[0]}") from None
    if a == b:
        return [a]
    paths = topology.equal_cost_paths(a, b)
    if not paths:
        raise RoutingError(f"no path between {src_host} and {dst_host}")
    choice = hash_index(HashSeed(mix64(seed, 0xEC3B), Purpose.INDEX), fingerprint, len(paths))
    return list(paths[choice])


# -- heterogeneity -------------------------------------------------------------


def gini(values: Sequence[float]) -> float:
    x = np.sort(np.asarray(values, dtype=np.float64))
    n = len(x)
    if n == 0 or x.sum() == 0:
        return 0.0
    # sum_i sum_j |x_i - x_j| / (2 n^2 mean), via the sorted-rank identity
    ranks = np.arange(1, n + 1)
    return float(np.sum((2 * ranks - n - 1) * x) / (n * x.sum()))


def cov(values: Sequence[float]) -> float:
    x = np.asarray(values, dtype=np.float64)
    m = x.mean()
    return float(x.std() / m) if m else 0.0


def _largest_remainder(shares: np.ndarray, total: int, floor: int = 0) -> np.ndarray:
    count = len(shares)
    spare = total - floor * count
    if spare < 0:
        raise GenerationError(f"total {total} cannot give {count} values >= {floor}")
    raw = shares / shares.sum() * spare
    out = np.floor(raw).astype(np.int64)
    missing = spare - int(out.sum())
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:missing]] += 1
    return out + floor


def gen_memory_distribution(count: int, base_bytes: int, target_gini: float, seed: int,
                            min_bytes: int = 8, tol: float = 0.01, attempts: int = 50) -> list[int]:
    """Per-switch memory sizes with mean ``base_bytes`` and a target Gini index.

    Lognormal draws with the shape parameter bisected to the target; the
    result is randomly permuted.
    """
    if not 0 <= target_gini < 0.7:
        raise GenerationError("target_gini must be in [0, 0.7)")
    if count < 1 or base_bytes < min_bytes:
        raise GenerationError("need count >= 1 and base_bytes >= min_bytes")
    if target_gini == 0:
        return [base_bytes] * count
    rng = np.random.default_rng(seed)
    total = base_bytes * count

    def realize(z, sigma):
        return _largest_remainder(np.exp(sigma * z), total, min_bytes)

    for _ in range(attempts):
        z = rng.standard_normal(count)
        lo, hi = 0.0, 12.0
        if gini(realize(z, hi)) < target_gini:
            continue
        for _ in range(80):
            mid = (lo + hi) / 2
            if gini(realize(z, mid)) < target_gini:
                lo = mid
            else:
                hi = mid
        for sigma in (lo, hi):
            vals = realize(z, sigma)
            if abs(gini(vals) - target_gini) <= tol:
                return [int(v) for v in rng.permutation(vals)]
    raise GenerationError(f"could not reach gini {target_gini} for {count} values")


def gen_load_shares(count: int, total: int, target_cov: float, seed: int,
                    min_value: int = 0, tol: float = 0.05, attempts: int = 50) -> list[int]:
    """Split ``total`` into ``count`` integers whose CoV hits ``target_cov``.

    Symmetric Dirichlet shares with the concentration bisected to the target.
    """
    if not 0 <= target_cov <= 1.8:
        raise GenerationError("target_cov must be in [0, 1.8]")
    if count < 1:
        raise GenerationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    if target_cov == 0:
        vals = _largest_remainder(np.ones(count), total, min_value)
        return [int(v) for v in rng.permutation(vals)]

    def realize(u, log_alpha):
        g = stats.gamma.ppf(u, np.exp(log_alpha))
        if not np.isfinite(g).all() or g.sum() <= 0:
            g = np.where(u == u.max(), 1.0, 0.0)
        return _largest_remainder(g, total, min_value)

    for _ in range(attempts):
        u = rng.uniform(0.001, 0.999, count)
        lo, hi = -12.0, 8.0  # log concentration; CoV falls as it grows
        if cov(realize(u, lo)) < target_cov or cov(realize(u, hi)) > target_cov:
            continue
        for _ in range(80):
            mid = (lo + hi) / 2
            if cov(realize(u, mid)) > target_cov:
                lo = mid
            else:
                hi = mid
        for la in (lo, hi):
            vals = realize(u, la)
            if abs(cov(vals) - target_cov) <= tol:
                return [int(v) for v in vals]
    raise GenerationError(f"could not reach CoV {target_cov} for {count} values summing to {total}")
