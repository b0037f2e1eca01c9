from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disketch.fragment import FragmentConfig, epoch_seeds
from disketch.records import (
    DuplicateRecordError,
    NotReadyError,
    RecordParseError,
    RecordSeeds,
    RecordStore,
    SchemaError,
    SubepochRecord,
    load_store,
    save_store,
)
from disketch.sketch import hash_index


def rec(F="f", E=0, S=0, n=1, w=4, kind="cms", counters=None, seeds=None):
    seeds = seeds or RecordSeeds(index=1, subepoch=2, sign=3, level=4)
    if counters is None:
        counters = np.zeros((2, w) if kind == "um" else w, dtype=np.int64)
    return SubepochRecord(F, E, S, n, w, kind, seeds, np.asarray(counters, dtype=np.int64))


def test_append_get():
    store = RecordStore()
    r = rec(counters=[1, 2, 3, 4])
    store.append(r)
    assert store.get("f", 0, 0) == r
    assert np.array_equal(store.get("f", 0, 0).counters, [1, 2, 3, 4])


def test_duplicate_rejected():
    store = RecordStore([rec()])
    with pytest.raises(DuplicateRecordError):
        store.append(rec())


def test_epoch_index_lists_all_subepochs():
    store = RecordStore(rec(E=3, S=s, n=8) for s in range(8))
    assert [r.subepoch for r in store.epoch_records("f", 3)] == list(range(8))
    assert store.n_of("f", 3) == 8 and store.is_complete("f", 3)


def test_schema_checks():
    with pytest.raises(SchemaError):
        rec(n=3)
    with pytest.raises(SchemaError):
        rec(S=2, n=2)
    with pytest.raises(SchemaError):
        rec(counters=[1, 2, 3])
    with pytest.raises(SchemaError):
        rec(kind="cs", seeds=RecordSeeds(index=1, subepoch=2))


def test_incomplete_epoch_not_ready():
    store = RecordStore([rec(S=0, n=4), rec(S=1, n=4)])
    with pytest.raises(NotReadyError):
        store.lookup_for_key("f", 0, 5)
    with pytest.raises(NotReadyError):
        store.seal()
    with pytest.raises(NotReadyError):
        store.n_of("f", 1)
    store.append(rec(S=2, n=4))
    store.append(rec(S=3, n=4))
    store.seal()
    assert len(store.lookup_for_key("f", 0, 5)) == 1


def test_lookup_for_key_follows_subepoch_hash():
    c = FragmentConfig("f", "cms", 64, 1.0, epoch_duration_ticks=1024, seed=9)
    sd = epoch_seeds(c, 0)
    store = RecordStore(rec(S=s, n=8, seeds=sd) for s in range(8))
    store.seal()
    key = next(k for k in range(1000) if hash_index(sd.subepoch_seed, k, 8) == 5)
    assert [r.subepoch for r in store.lookup_for_key("f", 0, key)] == [5]
    key = next(k for k in range(1000) if hash_index(sd.subepoch_seed, k, 8) == 1)
    assert [r.subepoch for r in store.lookup_for_key("f", 0, key, mitigated=True)] == [1, 5]


def test_round_trip_with_large_counter(tmp_path):
    store = RecordStore([rec(counters=[2**40, -(2**40), 0, 7]), rec(F="g", kind="cs", counters=[1, -1, 0, 0]),
                         rec(F="h", kind="um", counters=[[1, 2, 3, 4], [5, 6, 7, 8]])])
    path = tmp_path / "r.jsonl"
    save_store(path, store)
    back = load_store(path)
    assert back == store
    assert int(back.get("f", 0, 0).counters[0]) == 2**40


def test_empty_round_trip(tmp_path):
    path = tmp_path / "e.jsonl"
    save_store(path, RecordStore())
    assert len(load_store(path)) == 0


def test_bad_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    save_store(path, RecordStore([rec()]))
    with open(path, "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(RecordParseError) as exc:
        load_store(path)
    assert exc.value.line >= 2


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["a", "b", "c"]), st.integers(0, 3), st.sampled_from([1, 2, 4]),
                          st.lists(st.integers(-(2**50), 2**50), min_size=3, max_size=3)),
                max_size=12, unique_by=lambda t: (t[0], t[1])))
def test_round_trip_property(items):
    store = RecordStore()
    for F, E, n, c in items:
        for s in range(n):
            store.append(rec(F=F, E=E, S=s, n=n, w=3, kind="cs", counters=c))
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "r.jsonl"
        save_store(path, store)
        assert load_store(path) == store
