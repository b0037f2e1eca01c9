from __future__ import annotations

import numpy as np
import pytest
from scipy import stats

from disketch.fragment import FragmentConfig, fragment_seed
from disketch.network import build_fat_tree, fat_tree_preset
from disketch.workload import (
    SRC_IP,
    PathTable,
    Trace,
    TraceError,
    gen_zipf_trace,
    ground_truth,
    load_trace,
    map_flows_to_hosts,
    replay,
    replay_reference,
    route_trace,
    save_trace,
)


def test_empty_trace_file(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    assert len(load_trace(p)) == 0


def test_small_fixture(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("# header\n1,10.0.0.1,10.0.0.2,6,1,2,100\n5,10.0.0.1,10.0.0.2,6,1,2,60\n9,10.0.0.3,10.0.0.2,17,3,4,80\n")
    tr = load_trace(p)
    assert tr.timestamps.tolist() == [1, 5, 9] and tr.num_keys == 2
    assert load_trace(p, SRC_IP).num_keys == 2


def test_unsorted_trace_rejected(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("5,1,2,6,1,2,100\n1,1,2,6,1,2,100\n")
    with pytest.raises(TraceError):
        load_trace(p)


def test_trace_file_round_trip(tmp_path):
    tr = gen_zipf_trace(500, 50, duration_ticks=4096, seed=2)
    save_trace(tmp_path / "t.csv", tr)
    back = load_trace(tmp_path / "t.csv")
    assert np.array_equal(back.headers, tr.headers) and np.array_equal(back.timestamps, tr.timestamps)


def test_single_flow():
    tr = gen_zipf_trace(1000, 1, duration_ticks=4096, seed=1)
    assert tr.num_keys == 1


def test_zipf_zero_is_uniform():
    tr = gen_zipf_trace(100_000, 10, zipf_s=0.0, duration_ticks=1 << 16, seed=3)
    counts = np.bincount(tr.key_index)
    assert np.all(np.abs(counts / 10_000 - 1) <= 0.1)


@pytest.mark.parametrize("arrivals", ["paced", "poisson"])
def test_packet_times_uniform(arrivals):
    duration = 1 << 16
    tr = gen_zipf_trace(20_000, 100, duration_ticks=duration, seed=4, arrivals=arrivals)
    big = np.argmax(np.bincount(tr.key_index))
    t = tr.timestamps[tr.key_index == big] / duration
    assert stats.kstest(t, "uniform").pvalue > 0.001
    assert stats.kstest(tr.timestamps / duration, "uniform").pvalue > 0.001


def test_host_mapping_consistent():
    tr = gen_zipf_trace(2000, 200, duration_ticks=4096, seed=5)
    m = map_flows_to_hosts(tr, fat_tree_preset(), seed=1)
    src = tr.headers[:, 0]
    for a in np.unique(src)[:20]:
        assert len(np.unique(m.src_host[src == a])) == 1


def test_drop_fraction_near_one_over_hosts():
    topo = fat_tree_preset()
    tr = gen_zipf_trace(20_000, 8000, zipf_s=0.0, duration_ticks=1 << 16, seed=6)
    kept, paths = route_trace(tr, topo, seed=2)
    dropped = 1 - kept.num_keys / tr.num_keys
    assert abs(dropped - 1 / len(topo.hosts)) < 0.02
    assert len(paths) == kept.num_keys


def test_two_host_topology():
    topo = build_fat_tree(2, 1, hosts_per_edge=1)
    tr = gen_zipf_trace(500, 100, duration_ticks=4096, seed=7)
    kept, paths = route_trace(tr, topo, seed=1)
    assert len(set(paths.paths)) <= 2  # one path per direction
    assert 0 < kept.num_keys < tr.num_keys


def _frags(topo, n=1, kind="cms", mitigation=False, rho=1.0, T_e=1024):
    return {s: FragmentConfig(s, kind, 8 * 64 * (16 if kind == "um" else 1), rho, epoch_duration_ticks=T_e,
                              initial_subepochs=n, single_hop_mitigation=mitigation,
                              seed=fragment_seed(1, s), level_seed=9) for s in topo.switch_ids}


def test_one_packet_three_hops():
    topo = fat_tree_preset()
    tr = Trace(np.array([3]), np.array([[1, 2, 6, 1, 2]]), np.array([100]))
    paths = PathTable([("e0.0", "a0.0", "e0.1")])
    res = replay(tr, paths, _frags(topo), epochs=1)
    assert sum(res.updates.values()) == 3
    assert res.truth.counts.tolist() == [[1]]
    assert len(res.store) == len(topo.switches)


def test_record_count_bookkeeping():
    topo = fat_tree_preset()
    tr, paths = route_trace(gen_zipf_trace(5000, 500, duration_ticks=8 * 1024, seed=8), topo, 3)
    res = replay(tr, paths, _frags(topo, kind="cs", rho=0.3), epochs=8)
    for sw, hist in res.n_history.items():
        assert sum(hist) == sum(1 for r in res.store if r.fragment_id == sw)


@pytest.mark.parametrize("kind,mitigation", [("cms", False), ("cs", True), ("um", True)])
def test_vectorized_replay_matches_reference(kind, mitigation):
    topo = fat_tree_preset()
    tr, paths = route_trace(gen_zipf_trace(3000, 300, duration_ticks=4 * 1024, seed=9), topo, 4)
    frags = _frags(topo, kind=kind, mitigation=mitigation, rho=0.2)
    fast = replay(tr, paths, frags, epochs=4)
    slow = replay_reference(tr, paths, frags, epochs=4)
    assert fast.store == slow.store
    assert fast.n_history == slow.n_history
    assert fast.updates == slow.updates


def test_ground_truth_per_epoch():
    tr = Trace(np.array([0, 5, 1030, 2047]), np.array([[1, 2, 6, 1, 2]] * 2 + [[3, 2, 6, 1, 2]] * 2),
               np.array([1, 1, 1, 1]))
    gt = ground_truth(tr, PathTable([("x",), ("x",)]), 2, 1024)
    assert gt.counts.tolist() == [[2, 0], [0, 2]] and gt.total == 4
