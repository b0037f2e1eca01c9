from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from disketch.sketch import (
    CountMinRow,
    CountRow,
    HashSeed,
    LevelStack,
    Purpose,
    hash_index,
    hash_level,
    hash_sign,
    key_fingerprint,
    mix64,
)

IDX = HashSeed(11, Purpose.INDEX)
SGN = HashSeed(12, Purpose.SIGN)
LVL = HashSeed(13, Purpose.LEVEL)


def random_keys(count: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 2**63, size=count, dtype=np.uint64)


def test_width_one_maps_to_zero():
    assert hash_index(IDX, 12345, 1) == 0
    assert np.all(hash_index(IDX, random_keys(100), 1) == 0)


def test_hashes_are_deterministic():
    k = key_fingerprint((1, 2, 6, 80, 443))
    assert hash_index(IDX, k, 1000) == hash_index(IDX, k, 1000)
    assert hash_sign(SGN, k) == hash_sign(SGN, k)
    assert key_fingerprint((1, 2, 6, 80, 443)) == k


def test_scalar_and_vector_agree():
    keys = random_keys(50)
    vec = hash_index(IDX, keys, 97)
    assert [hash_index(IDX, int(k), 97) for k in keys] == vec.tolist()


def test_index_uniformity_chi_square():
    counts = np.bincount(hash_index(IDX, random_keys(100_000), 16), minlength=16)
    stat = stats.chisquare(counts).statistic
    assert stat < stats.chi2.ppf(0.999, 15)


def test_sign_balance():
    s = hash_sign(SGN, random_keys(100_000))
    assert set(np.unique(s)) == {-1, 1}
    assert 0.49 <= np.mean(s == 1) <= 0.51


def test_independent_sign_seeds_agree_half_the_time():
    keys = random_keys(100_000, 1)
    agree = np.mean(hash_sign(SGN, keys) == hash_sign(HashSeed(99, Purpose.SIGN), keys))
    assert 0.49 <= agree <= 0.51


def test_purposes_decorrelate_equal_values():
    keys = random_keys(10_000, 2)
    a = hash_index(HashSeed(5, Purpose.INDEX), keys, 2)
    b = hash_index(HashSeed(5, Purpose.SUBEPOCH), keys, 2)
    assert 0.47 <= np.mean(a == b) <= 0.53


def test_level_fractions():
    lv = hash_level(LVL, random_keys(1_000_000, 3))
    assert lv.min() >= 0
    assert 0.45 <= np.mean(lv >= 1) <= 0.55
    assert 0.056 <= np.mean(lv >= 4) <= 0.069


def test_seed_range_checked():
    with pytest.raises(ValueError):
        HashSeed(-1, Purpose.INDEX)
    with pytest.raises(ValueError):
        hash_index(IDX, 1, 0)


def test_mix64_is_order_sensitive():
    assert mix64(1, 2) != mix64(2, 1)
    assert 0 <= mix64(7) < 2**64


def test_cms_single_update():
    row = CountMinRow(32, IDX)
    row.update(42)
    assert row.counters.sum() == 1 and np.count_nonzero(row.counters) == 1


def test_cs_single_update():
    row = CountRow(32, IDX, SGN)
    row.update(42, 3)
    nz = row.counters[row.counters != 0]
    assert len(nz) == 1 and abs(nz[0]) == 3
    assert row.query(42) == 3


def test_cms_conservation():
    row = CountMinRow(64, IDX)
    for k in random_keys(1000, 4):
        row.update(int(k))
    assert row.counters.sum() == 1000


def test_empty_and_exact_queries():
    for row in (CountMinRow(64, IDX), CountRow(64, IDX, SGN)):
        assert row.query(5) == 0
        row.update(5, 7)
        assert row.query(5) == 7


def test_cms_collision_overcounts():
    keys = random_keys(200, 5)
    idx = hash_index(IDX, keys, 4)
    a, b = (int(k) for k in keys[idx == idx[0]][:2])
    row = CountMinRow(4, IDX)
    row.update(a, 3)
    row.update(b, 4)
    assert row.query(a) == 7 and row.query(b) == 7


def test_weight_must_be_positive():
    with pytest.raises(ValueError):
        CountMinRow(4, IDX).update(1, 0)


def test_level_stack_insertion_depth():
    keys = random_keys(5000, 6)
    lv = hash_level(LVL, keys, 4)
    stack = LevelStack(1 << 12, IDX, SGN, LVL, levels=4)
    k0 = int(keys[lv == 0][0])
    stack.update(k0, 1)
    assert stack.counters[0].any() and not stack.counters[1:].any()
    stack.reset()
    deep = int(keys[lv >= 4][0])
    stack.update(deep, 1)
    assert all(np.abs(stack.counters[i]).sum() == 1 for i in range(4))


def test_level_zero_conservation_bound():
    stack = LevelStack(16, IDX, SGN, LVL, levels=8)
    for k in random_keys(500, 7):
        stack.update(int(k))
    assert np.abs(stack.counters[0]).sum() <= 500


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2**63), st.integers(1, 20)), min_size=1, max_size=60),
       st.integers(1, 64), st.integers(0, 2**32))
def test_cms_one_sided(updates, width, seed):
    row = CountMinRow(width, HashSeed(seed, Purpose.INDEX))
    truth: dict[int, int] = {}
    for k, w in updates:
        row.update(k, w)
        truth[k] = truth.get(k, 0) + w
    assert all(row.query(k) >= c for k, c in truth.items())


def test_cs_unbiased_over_seeds():
    # one tracked key among heavy noise; the estimate averages to the truth over seeds
    noise = random_keys(300, 8)
    target = 12345
    est = []
    for s in range(400):
        row = CountRow(8, HashSeed(s, Purpose.INDEX), HashSeed(s + 10_000, Purpose.SIGN))
        row.update(target, 10)
        for k in noise:
            row.update(int(k), 5)
        est.append(row.query(target))
    est = np.asarray(est)
    sem = est.std(ddof=1) / np.sqrt(len(est))
    assert abs(est.mean() - 10) < 4 * sem
