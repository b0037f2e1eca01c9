from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disketch.fragment import FragmentConfig, fragment_seed
from disketch.network import fat_tree_preset
from disketch.query import (
    EpochMerge,
    PathResolutionError,
    Query,
    QueryError,
    QueryType,
    UnsupportedQueryError,
    build_grid,
    entropy_estimate,
    epoch_estimate,
    estimate_matrix,
    exact_entropy,
    heavy_hitters,
    merge_epochs,
    merge_grid,
    run_query,
    select_records,
)
from disketch.records import NotReadyError, RecordSeeds, RecordStore, SubepochRecord
from disketch.sketch import hash_sign
from disketch.workload import Trace, PathTable, gen_zipf_trace, replay, route_trace

SEEDS = RecordSeeds(index=1, subepoch=2, sign=3, level=4)
KEY = 99


def one(F, S, n, value, kind="cms"):
    """A width-1 record whose raw estimate for KEY is ``value``."""
    c = value if kind == "cms" else value * hash_sign(SEEDS.sign_seed, KEY)
    return SubepochRecord(F, 0, S, n, 1, kind, SEEDS, np.array([c], dtype=np.int64))


def layout(kind="cms"):
    # n = {4, 8, 2, 8, 4}; columns: R1 {0,1}, R2 {0}, R3 {0..3}, R4 {4}, R5 {6,7}; column 5 blind
    return [one("R1", 0, 4, 8, kind), one("R2", 0, 8, 3, kind), one("R3", 0, 2, 16, kind),
            one("R4", 4, 8, 2, kind), one("R5", 3, 4, 12, kind)]


def test_grid_layout_and_conservation():
    grid = build_grid(layout(), KEY)
    assert grid.n_m == 8
    assert sorted(grid.columns[0]) == [3, 4, 4]
    assert grid.columns[2] == [4.0] and grid.columns[4] == [2.0]
    assert grid.blind_spots == [5]
    assert sum(v for c in grid.columns for v in c) == 8 + 3 + 16 + 2 + 12


def test_grid_example_cms():
    recs = layout("cms")
    merged = merge_grid(build_grid(recs, KEY), "cms")
    assert merged == pytest.approx([3, 4, 4, 4, 2, 29 / 7, 6, 6])
    assert epoch_estimate(recs, KEY) == pytest.approx(232 / 7)


def test_grid_example_cs():
    assert epoch_estimate(layout("cs"), KEY) == pytest.approx(240 / 7)


def test_single_half_epoch_record():
    # n_m = 2 so N_R = 1: the covered column keeps O_R and the blind spot copies it
    r = one("A", 1, 2, 10)
    grid = build_grid([r], KEY)
    assert grid.columns == [[], [10.0]]
    assert merge_grid(grid, "cms") == [10.0, 10.0]
    assert epoch_estimate([r], KEY) == 20.0


def test_n1_is_plain_min_and_median():
    recs = [one(f, 0, 1, v, "cs") for f, v in zip("ABCD", (5, 1, 9, 7))]
    assert epoch_estimate(recs, KEY) == 6.0
    assert epoch_estimate([one(f, 0, 1, v) for f, v in zip("ABC", (5, 1, 9))], KEY) == 1.0


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([1, 2, 4, 8, 16]), st.integers(0, 15), st.integers(-50, 200)),
                min_size=1, max_size=8), st.sampled_from(["cms", "cs"]))
def test_blind_spot_rule_forms_agree(specs, kind):
    recs = [one(f"F{i}", s % n, n, v, kind) for i, (n, s, v) in enumerate(specs)]
    grid = build_grid(recs, KEY)
    assert sum(v for c in grid.columns for v in c) == pytest.approx(sum(v for _, _, v in specs))
    n_m, b = grid.n_m, len(grid.blind_spots)
    covered = [m for m, c in zip(merge_grid(grid, kind), grid.columns) if c]
    assert epoch_estimate(recs, KEY, kind) == pytest.approx(n_m / (n_m - b) * sum(covered))
    # column-count correctness: record R covers n_m / R.n columns from R.S * n_m / R.n
    expected = [0] * n_m
    for r in recs:
        share = n_m // r.n
        for col in range(r.subepoch * share, (r.subepoch + 1) * share):
            expected[col] += 1
    assert [len(c) for c in grid.columns] == expected


def test_merge_epochs():
    assert merge_epochs([10, 14], EpochMerge.SUM) == 24
    assert merge_epochs([10, 14], EpochMerge.AVERAGE) == 12


def test_query_validation():
    with pytest.raises(QueryError):
        Query(QueryType.FREQUENCY, ())
    with pytest.raises(QueryError):
        Query(QueryType.FREQUENCY, (0,))
    with pytest.raises(QueryError):
        Query.for_window(QueryType.FREQUENCY, 0, 1500, 1024, key=1)
    assert Query.for_window(QueryType.FREQUENCY, 1024, 4096, 1024, key=1).epochs == (1, 2, 3)


@pytest.fixture(scope="module")
def deployment():
    topo = fat_tree_preset()
    tr, paths = route_trace(gen_zipf_trace(20_000, 2000, duration_ticks=8 * 4096, seed=1), topo, 1)
    out = {}
    for kind in ("cms", "cs", "um"):
        for mit in (False, True):
            frs = {s: FragmentConfig(s, kind, 512 if kind != "um" else 4096, rho_target=0.5,
                                     epoch_duration_ticks=4096, single_hop_mitigation=mit,
                                     seed=fragment_seed(3, s), level_seed=9) for s in topo.switch_ids}
            out[kind, mit] = replay(tr, paths, frs, epochs=8)
    return tr, paths, out


def test_select_records_counts(deployment):
    tr, paths, out = deployment
    res = out["cs", True]
    five = next(k for k in range(tr.num_keys) if len(paths[k]) == 5)
    assert len(select_records(res.store, 3, paths[five], int(tr.fingerprints[five]))) == 5
    single = next(k for k in range(tr.num_keys) if len(paths[k]) == 1
                  and res.store.n_of(paths[k][0], 3) >= 2)
    assert len(select_records(res.store, 3, paths[single], int(tr.fingerprints[single]), True)) == 2
    with pytest.raises(PathResolutionError):
        select_records(res.store, 3, (), 1)


@pytest.mark.parametrize("kind", ["cms", "cs", "um"])
@pytest.mark.parametrize("mit", [False, True])
def test_batched_equals_scalar(deployment, kind, mit):
    tr, paths, out = deployment
    res = out[kind, mit]
    M = estimate_matrix(res.store, tr.fingerprints, paths.paths, range(8), mit)
    for k in range(0, tr.num_keys, 23):
        fp = int(tr.fingerprints[k])
        for e in (0, 5):
            ref = epoch_estimate(select_records(res.store, e, paths[k], fp, mit), fp)
            assert M[k, e] == pytest.approx(ref, rel=1e-12, abs=1e-9)
        q = Query(QueryType.FREQUENCY, tuple(range(8)), fp, mitigation=mit)
        assert run_query(q, res.store, paths[k]) == pytest.approx(M[k].sum(), rel=1e-12, abs=1e-9)


def test_heavy_hitter_thresholds(deployment):
    tr, paths, out = deployment
    store = out["cms", False].store
    assert len(heavy_hitters(store, tr.fingerprints, paths.paths, range(8), 0)) == tr.num_keys
    assert len(heavy_hitters(store, tr.fingerprints, paths.paths, range(8), math.inf)) == 0


def test_entropy_needs_univmon(deployment):
    tr, paths, out = deployment
    with pytest.raises(UnsupportedQueryError):
        entropy_estimate(out["cs", False].store, tr.fingerprints, paths.paths, range(2))
    with pytest.raises(UnsupportedQueryError):
        run_query(Query(QueryType.ENTROPY, (0,)), out["um", False].store, paths[0])


def test_unsealed_store_rejected():
    store = RecordStore([one("A", 0, 1, 3)])
    with pytest.raises(NotReadyError):
        run_query(Query(QueryType.FREQUENCY, (0,), KEY), store, ("A",))


def _um_store(counts: list[int], width: int, seed: int = 0):
    """One UnivMon fragment on a one-hop path, n = 1, one epoch."""
    rows = np.repeat(np.arange(len(counts)), counts)
    headers = np.stack([rows + 1, np.full_like(rows, 7), np.full_like(rows, 6), rows, rows], axis=1)
    ts = np.sort(np.random.default_rng(seed).integers(0, 1024, len(rows)))
    tr = Trace(ts, headers, np.ones(len(rows), dtype=np.int64))
    paths = PathTable([("A",)] * tr.num_keys)
    frag = {"A": FragmentConfig("A", "um", 8 * 16 * width, 1.0, epoch_duration_ticks=1024,
                                adaptation="fixed", seed=seed, level_seed=seed + 1)}
    return tr, paths, replay(tr, paths, frag, epochs=1)


def test_entropy_single_key():
    tr, paths, res = _um_store([500], 64)
    assert abs(entropy_estimate(res.store, tr.fingerprints, paths.paths, [0])) <= 0.05


@pytest.mark.parametrize("k", [4, 16, 64, 200])
def test_entropy_uniform_exact_regime(k):
    tr, paths, res = _um_store([20] * k, 64 * k, seed=k)
    est = entropy_estimate(res.store, tr.fingerprints, paths.paths, [0], top_k=max(32, k))
    assert est == pytest.approx(math.log2(k), abs=0.1)


def test_exact_entropy():
    assert exact_entropy(np.array([5, 5, 5, 5])) == pytest.approx(2.0)
    assert exact_entropy(np.array([0, 9])) == 0.0


def test_cms_exact_regime_composite():
    # huge widths, uniform traffic: every n configuration gives the exact count
    topo = fat_tree_preset()
    tr, paths = route_trace(gen_zipf_trace(3000, 40, zipf_s=0.0, duration_ticks=4096, seed=2, arrivals="paced"),
                            topo, 2)
    frs = {s: FragmentConfig(s, "cms", 8 * 1 << 16, 1.0, epoch_duration_ticks=4096, adaptation="fixed",
                             initial_subepochs=1, seed=fragment_seed(4, s)) for s in topo.switch_ids}
    res = replay(tr, paths, frs, epochs=1)
    M = estimate_matrix(res.store, tr.fingerprints, paths.paths, [0])
    assert np.array_equal(M[:, 0], res.truth.counts[:, 0])
