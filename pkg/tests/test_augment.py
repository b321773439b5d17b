"""Positive-pair samplers and negative assignment.

Window samplers are checked structurally (index recovery via timestamps) and
distributionally (seeded draws against binomial 3-sigma bands).
"""

from math import comb

import numpy as np
import pytest

import cstte.augment as aug
from cstte.errors import ConfigError, DataError
from cstte.trajdata import Trajectory


def indexed_traj(n, traj_id="T"):
    # timestamps encode the record index so views can be mapped back
    t = 60.0 * np.arange(n)
    lon = 116.0 + 0.001 * np.arange(n)
    lat = 39.0 + 0.002 * np.arange(n)
    loc = np.arange(n) % 7
    return Trajectory(traj_id, t, lon, lat, loc)


def indices_of(view):
    idx = np.rint(np.asarray(view.t) / 60.0).astype(int)
    return idx


def three_sigma(n_draws, p):
    return 3.0 * np.sqrt(n_draws * p * (1.0 - p))


# ---------------------------------------------------------------------------
# two-hop split
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", [4, 5, 6, 7, 20, 21])
def test_two_hop_positions(n):
    traj = indexed_traj(n)
    pair = aug.two_hop_split(traj)
    q = indices_of(pair.query)
    p = indices_of(pair.positive)
    assert np.array_equal(q, np.arange(0, n, 2))
    assert np.array_equal(p, np.arange(1, n, 2))
    assert pair.traj_id == traj.traj_id


@pytest.mark.parametrize("n", [4, 9, 16])
def test_two_hop_views_partition_and_interleave(n):
    traj = indexed_traj(n)
    pair = aug.two_hop_split(traj)
    q = indices_of(pair.query)
    p = indices_of(pair.positive)
    assert len(set(q) & set(p)) == 0
    assert sorted(set(q) | set(p)) == list(range(n))
    # strict interleave: q0 < p0 < q1 < p1 < ...
    merged = np.empty(n, dtype=int)
    merged[0::2] = q
    merged[1::2] = p
    assert np.all(np.diff(merged) > 0)


def test_two_hop_copies_all_fields():
    traj = indexed_traj(9)
    pair = aug.two_hop_split(traj)
    q = indices_of(pair.query)
    assert np.array_equal(pair.query.lon, traj.lon[q])
    assert np.array_equal(pair.query.lat, traj.lat[q])
    assert np.array_equal(pair.query.loc, traj.loc[q])


@pytest.mark.parametrize("n", [2, 3])
def test_two_hop_rejects_short(n):
    with pytest.raises(DataError):
        aug.two_hop_split(indexed_traj(n))


def test_two_hop_sampler_wrapper():
    rng = np.random.default_rng(0)
    sampler = aug.get_sampler("two_hop")
    assert sampler(indexed_traj(3), rng) is None
    pair = sampler(indexed_traj(8), rng)
    ref = aug.two_hop_split(indexed_traj(8))
    assert np.array_equal(indices_of(pair.query), indices_of(ref.query))
    assert np.array_equal(indices_of(pair.positive), indices_of(ref.positive))


# ---------------------------------------------------------------------------
# random subset sampler
# ---------------------------------------------------------------------------


def test_random_structural():
    traj = indexed_traj(30)
    rng = np.random.default_rng(7)
    for _ in range(200):
        pair = aug.sample_random(traj, rng)
        assert pair is not None
        q = indices_of(pair.query)
        p = indices_of(pair.positive)
        for side in (q, p):
            assert len(side) >= 2
            assert np.all(np.diff(side) > 0)  # order preserved, no repeats
            assert side.min() >= 0 and side.max() < traj.n


def test_random_inclusion_rate_matches_keep_prob():
    traj = indexed_traj(10)
    rng = np.random.default_rng(11)
    n_draws = 500
    counts = np.zeros(traj.n)
    for _ in range(n_draws):
        pair = aug.sample_random(traj, rng)
        counts[indices_of(pair.query)] += 1
    band = three_sigma(n_draws, 0.5)
    assert np.all(np.abs(counts - 0.5 * n_draws) < band)


def test_random_keep_prob_binding_via_registry():
    traj = indexed_traj(10)
    rng = np.random.default_rng(3)
    sampler = aug.get_sampler("random", keep_prob=0.9)
    sizes = [len(indices_of(sampler(traj, rng).query)) for _ in range(300)]
    # mean query size ~ Binomial(10, 0.9) mean, sigma of the mean ~ 0.055
    assert abs(np.mean(sizes) - 9.0) < 0.2


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.2, 1.5])
def test_random_rejects_bad_keep_prob(bad):
    with pytest.raises(ConfigError):
        aug.sample_random(indexed_traj(10), np.random.default_rng(0), keep_prob=bad)


def test_random_gives_up_after_retries():
    # keeping both of 2 records at p=1e-9 has probability ~1e-18 per mask
    rng = np.random.default_rng(0)
    assert aug.sample_random(indexed_traj(2), rng, keep_prob=1e-9) is None


# ---------------------------------------------------------------------------
# adjacent split sampler
# ---------------------------------------------------------------------------


def test_adjacent_n4_is_forced():
    rng = np.random.default_rng(0)
    pair = aug.sample_adjacent(indexed_traj(4), rng)
    assert np.array_equal(indices_of(pair.query), [0, 1])
    assert np.array_equal(indices_of(pair.positive), [2, 3])


@pytest.mark.parametrize("n", [5, 9])
def test_adjacent_structural(n):
    traj = indexed_traj(n)
    rng = np.random.default_rng(13)
    for _ in range(100):
        pair = aug.sample_adjacent(traj, rng)
        q = indices_of(pair.query)
        p = indices_of(pair.positive)
        assert np.array_equal(np.concatenate([q, p]), np.arange(n))
        assert 2 <= len(q) <= n - 2
        assert len(p) >= 2


def test_adjacent_short_trajectory_returns_none():
    rng = np.random.default_rng(0)
    assert aug.sample_adjacent(indexed_traj(3), rng) is None


def test_adjacent_cut_uniform():
    traj = indexed_traj(6)
    rng = np.random.default_rng(29)
    n_draws = 3000
    cut_counts = {2: 0, 3: 0, 4: 0}
    for _ in range(n_draws):
        pair = aug.sample_adjacent(traj, rng)
        cut_counts[len(indices_of(pair.query))] += 1
    band = three_sigma(n_draws, 1 / 3)
    for count in cut_counts.values():
        assert abs(count - n_draws / 3) < band


# ---------------------------------------------------------------------------
# overlapping window sampler
# ---------------------------------------------------------------------------


def window_bounds(view):
    idx = indices_of(view)
    assert np.array_equal(idx, np.arange(idx[0], idx[-1] + 1))  # contiguous
    return int(idx[0]), int(idx[-1])


@pytest.mark.parametrize("n", [3, 4, 8, 15])
def test_overlap_structural(n):
    traj = indexed_traj(n)
    rng = np.random.default_rng(17)
    for _ in range(300):
        pair = aug.sample_overlap(traj, rng)
        a1, b1 = window_bounds(pair.query)
        a2, b2 = window_bounds(pair.positive)
        assert a1 < a2 <= b1 < b2
        assert b1 - a1 >= 1 and b2 - a2 >= 1  # both windows >= 2 records


def test_overlap_n3_is_forced():
    # only one sorted triple exists, so both windows are pinned
    rng = np.random.default_rng(0)
    pair = aug.sample_overlap(indexed_traj(3), rng)
    assert np.array_equal(indices_of(pair.query), [0, 1])
    assert np.array_equal(indices_of(pair.positive), [1, 2])


def test_overlap_short_trajectory_returns_none():
    rng = np.random.default_rng(0)
    assert aug.sample_overlap(indexed_traj(2), rng) is None


def test_overlap_single_point_share_rate():
    # windows share exactly one record iff the draw came from the
    # three-distinct-positions branch, which has weight C(n,3) of
    # C(n,4) + C(n,3)
    n = 6
    traj = indexed_traj(n)
    rng = np.random.default_rng(23)
    n_draws = 4000
    single = 0
    for _ in range(n_draws):
        pair = aug.sample_overlap(traj, rng)
        _, b1 = window_bounds(pair.query)
        a2, _ = window_bounds(pair.positive)
        if a2 == b1:
            single += 1
    p = comb(n, 3) / (comb(n, 3) + comb(n, 4))
    assert abs(single - n_draws * p) < three_sigma(n_draws, p)


# ---------------------------------------------------------------------------
# subsuming window sampler
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("n", [4, 5, 10])
def test_subsume_structural(n):
    traj = indexed_traj(n)
    rng = np.random.default_rng(31)
    for _ in range(300):
        pair = aug.sample_subsume(traj, rng)
        qs, qe = window_bounds(pair.query)
        ps, pe = window_bounds(pair.positive)
        assert qe - qs + 1 >= 4
        assert pe - ps + 1 >= 2
        assert qs <= ps and pe <= qe
        assert (pe - ps) < (qe - qs)  # strictly shorter, so a proper sub-window


def test_subsume_n4_query_is_whole_trajectory():
    traj = indexed_traj(4)
    rng = np.random.default_rng(5)
    for _ in range(50):
        pair = aug.sample_subsume(traj, rng)
        assert np.array_equal(indices_of(pair.query), np.arange(4))
        assert len(indices_of(pair.positive)) in (2, 3)


def test_subsume_short_trajectory_returns_none():
    rng = np.random.default_rng(0)
    assert aug.sample_subsume(indexed_traj(3), rng) is None


def test_subsume_long_window_length_distribution():
    # for n=6 the (start, length) grid gives length weights 3:2:1
    traj = indexed_traj(6)
    rng = np.random.default_rng(41)
    n_draws = 3000
    length_counts = {4: 0, 5: 0, 6: 0}
    for _ in range(n_draws):
        pair = aug.sample_subsume(traj, rng)
        qs, qe = window_bounds(pair.query)
        length_counts[qe - qs + 1] += 1
    for length, weight in ((4, 3 / 6), (5, 2 / 6), (6, 1 / 6)):
        expected = n_draws * weight
        assert abs(length_counts[length] - expected) < three_sigma(n_draws, weight)


def test_draw_window_uniform_over_placements():
    rng = np.random.default_rng(3)
    n_draws = 6000
    counts = {}
    for _ in range(n_draws):
        start, length = aug._draw_window(rng, 4, 2)
        assert length >= 2 and start >= 0 and start + length <= 4
        counts[(start, length)] = counts.get((start, length), 0) + 1
    # 6 windows total: 3 of length 2, 2 of length 3, 1 of length 4
    assert len(counts) == 6
    band = three_sigma(n_draws, 1 / 6)
    for count in counts.values():
        assert abs(count - n_draws / 6) < band


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def test_registry_names_all_resolve_and_run():
    traj = indexed_traj(8)
    rng = np.random.default_rng(2)
    assert set(aug.SAMPLER_NAMES) == {"two_hop", "random", "adjacent", "overlap", "subsume"}
    for name in aug.SAMPLER_NAMES:
        pair = aug.get_sampler(name)(traj, rng)
        assert pair is None or isinstance(pair, aug.SamplePair)


def test_registry_unknown_name():
    with pytest.raises(ConfigError, match="warp"):
        aug.get_sampler("warp")


# ---------------------------------------------------------------------------
# negative assignment
# ---------------------------------------------------------------------------


def test_negatives_never_reference_own_pair():
    rng = np.random.default_rng(19)
    for _ in range(50):
        refs = aug.assign_negatives(4, 2, rng)
        assert len(refs) == 4
        for i, drawn in enumerate(refs):
            assert len(drawn) == 2
            assert len(set(drawn)) == 2  # without replacement
            for j, side in drawn:
                assert j != i
                assert 0 <= j < 4
                assert side in (aug.QUERY_SIDE, aug.POSITIVE_SIDE)


def test_negatives_at_capacity_use_every_candidate():
    rng = np.random.default_rng(0)
    refs = aug.assign_negatives(3, 4, rng)
    for i, drawn in enumerate(refs):
        expected = {(j, s) for j in range(3) if j != i for s in (0, 1)}
        assert set(drawn) == expected


def test_negatives_over_capacity_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigError):
        aug.assign_negatives(3, 5, rng)
    with pytest.raises(ConfigError):
        aug.assign_negatives(1, 1, rng)  # a lone pair offers no negatives


def test_negatives_require_at_least_one():
    with pytest.raises(ConfigError):
        aug.assign_negatives(4, 0, np.random.default_rng(0))


def test_negatives_uniform_over_candidates():
    rng = np.random.default_rng(37)
    n_draws = 3000
    counts = {(j, s): 0 for j in range(1, 4) for s in (0, 1)}
    for _ in range(n_draws):
        refs = aug.assign_negatives(4, 2, rng)
        for ref in refs[0]:
            counts[ref] += 1
    # each of pair 0's six candidates is picked with probability 2/6
    p = 2 / 6
    for count in counts.values():
        assert abs(count - n_draws * p) < three_sigma(n_draws, p)
