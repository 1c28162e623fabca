"""Interval clustering: DP solver against exhaustive enumeration.

The oracle below recomputes segment costs with plain Python loops and
enumerates every feasible composition of T into k parts, so it shares no
code with the prefix-sum implementation under test.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import brute_force_min, naive_segment_cost, random_cost

from mtldiff.clustering import (
    IntervalClustering,
    SegmentCost,
    default_bounds,
    read_clustering,
    solve,
    write_clustering,
)
from mtldiff.errors import FormatError, InfeasibleClusteringError, VersionError
from mtldiff.schedule import NoiseSchedule


# --- defaults and hand examples -----------------------------------------

def test_default_bounds_values():
    assert default_bounds(1000, 5) == (100, 300)
    assert default_bounds(10, 5) == (1, 3)
    assert default_bounds(7, 7) == (1, 2)


def test_default_bounds_rejects_bad_args():
    with pytest.raises(ValueError):
        default_bounds(4, 5)
    with pytest.raises(ValueError):
        default_bounds(10, 0)


def test_segment_cost_single_point():
    ts = SegmentCost.timestep(10)
    assert ts.segment_cost(4, 4) == 0.0
    M = np.eye(6)
    grad = SegmentCost.gradient(M)
    assert grad.segment_cost(3, 3) == -1.0


def test_segment_cost_hand_cases():
    ts = SegmentCost.timestep(10)
    # [1,3]: center 2, costs 1+0+1
    assert ts.segment_cost(1, 3) == 2.0
    # [1,4]: center floors to 2, costs 1+0+1+2
    assert ts.segment_cost(1, 4) == 4.0


def test_segment_cost_range_errors():
    ts = SegmentCost.timestep(10)
    for l, r in [(0, 3), (3, 11), (5, 4)]:
        with pytest.raises(ValueError):
            ts.segment_cost(l, r)


@pytest.mark.parametrize("kind", ["timestep", "snr", "gradient"])
def test_segment_cost_matches_naive(rng, kind):
    T = 17
    cost = random_cost(rng, kind, T)
    for _ in range(50):
        l = int(rng.integers(1, T + 1))
        r = int(rng.integers(l, T + 1))
        assert cost.segment_cost(l, r) == pytest.approx(
            naive_segment_cost(cost, l, r), rel=1e-12, abs=1e-12)


def test_snr_cost_uses_schedule_log_snr(schedule_64):
    cost = SegmentCost.snr(schedule_64)
    ls = schedule_64.log_snr_all()
    l, r = 5, 20
    c = (l + r) // 2
    expect = sum(abs(ls[c - 1] - ls[t - 1]) for t in range(l, r + 1))
    assert cost.segment_cost(l, r) == pytest.approx(expect, rel=1e-12)


def test_cost_rejects_non_monotone_values():
    with pytest.raises(ValueError):
        SegmentCost("snr", 4, values=np.array([1.0, 3.0, 2.0, 4.0]))


def test_gradient_cost_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        SegmentCost("gradient", 5, matrix=np.eye(4))


# --- solver -------------------------------------------------------------

def test_solve_spec_example_T6_k2():
    got = solve(SegmentCost.timestep(6), 2, min_size=1, max_size=5)
    assert got.bounds == ((1, 3), (4, 6))
    assert got.total_cost == 4.0


def test_solve_uniform_intervals_small():
    got = solve(SegmentCost.timestep(100), 5)
    assert got.bounds == ((1, 20), (21, 40), (41, 60), (61, 80), (81, 100))


def test_solve_k1_is_single_interval(rng):
    for kind in ("timestep", "snr", "gradient"):
        cost = random_cost(rng, kind, 12)
        got = solve(cost, 1, min_size=1, max_size=12)
        assert got.bounds == ((1, 12),)
        assert got.total_cost == pytest.approx(naive_segment_cost(cost, 1, 12))


def test_solve_matches_bruteforce_randomized(rng):
    kinds = ("timestep", "snr", "gradient")
    for trial in range(60):
        T = int(rng.integers(4, 25))
        k = int(rng.integers(1, min(4, T) + 1))
        cost = random_cost(rng, kinds[trial % 3], T)
        if trial % 2 == 0:
            lo, hi = default_bounds(T, k)
        else:
            lo, hi = 1, T
        got = solve(cost, k, min_size=lo, max_size=hi)
        expect = brute_force_min(cost, k, lo, hi)
        assert got.total_cost == pytest.approx(expect, rel=1e-9, abs=1e-9)
        achieved = sum(naive_segment_cost(cost, l, r) for l, r in got.bounds)
        assert achieved == pytest.approx(got.total_cost, rel=1e-9, abs=1e-9)
        assert all(lo <= r - l + 1 <= hi for l, r in got.bounds)


def test_solve_is_deterministic(rng):
    cost = random_cost(rng, "gradient", 20)
    a = solve(cost, 3)
    b = solve(cost, 3)
    assert a == b


def test_relaxing_bounds_never_increases_cost(rng):
    for _ in range(20):
        T = int(rng.integers(6, 25))
        k = int(rng.integers(2, min(4, T // 2) + 1))
        cost = random_cost(rng, "snr", T)
        lo, hi = default_bounds(T, k)
        tight = solve(cost, k, min_size=lo, max_size=hi)
        loose = solve(cost, k, min_size=max(1, lo - 1), max_size=min(T, hi + 1))
        assert loose.total_cost <= tight.total_cost + 1e-12


@given(T=st.integers(2, 60), k=st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_default_solve_respects_bounds(T, k):
    if k > T:
        return
    lo, hi = default_bounds(T, k)
    if k * lo > T or k * hi < T:
        with pytest.raises(InfeasibleClusteringError):
            solve(SegmentCost.timestep(T), k)
        return
    got = solve(SegmentCost.timestep(T), k)
    assert got.T == T
    assert all(lo <= s <= hi for s in got.sizes())
    assert sum(got.sizes()) == T


def test_solve_infeasible_bounds():
    with pytest.raises(InfeasibleClusteringError):
        solve(SegmentCost.timestep(10), 3, min_size=4, max_size=5)
    with pytest.raises(InfeasibleClusteringError):
        solve(SegmentCost.timestep(10), 2, min_size=1, max_size=4)


def test_solve_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        solve(SegmentCost.timestep(10), 2, min_size=5, max_size=2)


# --- IntervalClustering -------------------------------------------------

def test_clustering_validation():
    with pytest.raises(ValueError):
        IntervalClustering(k=2, bounds=((2, 5), (6, 9)), total_cost=0.0)
    with pytest.raises(ValueError):
        IntervalClustering(k=2, bounds=((1, 5), (7, 9)), total_cost=0.0)
    with pytest.raises(ValueError):
        IntervalClustering(k=1, bounds=((1, 5), (6, 9)), total_cost=0.0)


def test_assign_boundaries():
    cl = solve(SegmentCost.timestep(1000), 5)
    assert cl.assign(1) == 1
    assert cl.assign(201) == 2
    assert cl.assign(200) == 1
    assert cl.assign(1000) == 5
    for i, (l, r) in enumerate(cl.bounds, start=1):
        assert cl.assign(l) == i
        assert cl.assign(r) == i
    np.testing.assert_array_equal(cl.assign(np.array([1, 400, 401])), [1, 2, 3])
    with pytest.raises(IndexError):
        cl.assign(0)
    with pytest.raises(IndexError):
        cl.assign(1001)


# --- file format --------------------------------------------------------

def test_clustering_file_roundtrip(tmp_path, schedule_64):
    cost = SegmentCost.snr(schedule_64)
    cl = solve(cost, 4)
    path = tmp_path / "clusters.txt"
    write_clustering(path, cl, cost)
    got, kind, seg = read_clustering(path)
    assert got == cl
    assert kind == "snr"
    assert len(seg) == 4
    for (l, r), s in zip(cl.bounds, seg):
        assert s == pytest.approx(cost.segment_cost(l, r), rel=1e-15)


def test_read_clustering_rejects_garbage(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("hello world\n")
    with pytest.raises(FormatError):
        read_clustering(p)


def test_read_clustering_rejects_future_version(tmp_path, schedule_64):
    cost = SegmentCost.snr(schedule_64)
    cl = solve(cost, 2)
    p = tmp_path / "c.txt"
    write_clustering(p, cl, cost)
    lines = p.read_text().splitlines()
    lines[0] = "MTLDIFF-CLUSTERS v9"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(VersionError):
        read_clustering(p)


def test_read_clustering_rejects_tampered_total(tmp_path):
    cost = SegmentCost.timestep(12)
    cl = solve(cost, 2, min_size=1, max_size=12)
    p = tmp_path / "c.txt"
    write_clustering(p, cl, cost)
    lines = p.read_text().splitlines()
    lines[-1] = "total,timestep,99.5"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError):
        read_clustering(p)


def test_read_clustering_rejects_gap_in_intervals(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text(
        "MTLDIFF-CLUSTERS v1\n"
        "index,l,r,size,segment_cost\n"
        "1,1,4,4,2\n"
        "2,6,9,4,2\n"
        "total,timestep,4\n"
    )
    with pytest.raises(FormatError):
        read_clustering(p)
