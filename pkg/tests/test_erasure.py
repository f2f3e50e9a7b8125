from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ustmix.erasure import (
    SimplePath,
    backward_le,
    forward_le,
    inverse_reversal_map,
    laplacian_walk_law,
    lerw_path_probability,
    mixed_le,
    reversal_map,
    scan_quasiloops,
)
from ustmix.lattice import grid_wired, t3_graph, wired_from_edges
from ustmix.walk import run_walk, schedule


def test_forward_and_backward_differ_on_a_small_path():
    path = [0, 1, 2, 0, 2, 3]
    assert forward_le(path).vertices == (0, 2, 3)
    assert backward_le(path).vertices == (0, 1, 2, 3)


def test_erasures_of_a_simple_path_are_the_identity():
    path = [4, 1, 7, 2]
    assert forward_le(path).vertices == backward_le(path).vertices == tuple(path)


def test_mixed_with_a_single_segment_is_backward():
    path = [0, 1, 2, 0, 2, 3]
    assert mixed_le(path, [0, 5]).vertices == backward_le(path).vertices


def test_simple_path_rejects_repeats():
    with pytest.raises(ValueError):
        SimplePath((0, 1, 0))


def _random_sets(g, rng):
    odd = rng.random(g.n) < 0.3
    even = rng.random(g.n) < 0.3
    return odd, even


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.sampled_from([2, 3, 4]))
def test_reversal_map_identity_and_inverse(seed, k):
    g = grid_wired(k)
    rng = np.random.default_rng(seed)
    X = run_walk(g, int(rng.integers(g.n)), rng=rng)
    sched = schedule(X, _random_sets(g, rng))
    Xt = reversal_map(X, sched)
    assert sorted(Xt.slots.tolist()) == sorted(X.slots.tolist())  # same weight
    assert mixed_le(Xt, sched) == forward_le(X)
    back = inverse_reversal_map(Xt, sched)
    assert np.array_equal(back.vertices, X.vertices) and np.array_equal(back.slots, X.slots)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mixed_erasure_is_a_simple_path_ending_at_the_end(seed):
    g = grid_wired(3)
    rng = np.random.default_rng(seed)
    X = run_walk(g, 4, rng=rng)
    Y = mixed_le(X, schedule(X, _random_sets(g, rng)))
    assert Y.vertices[0] == X.start and Y.vertices[-1] == X.end
    assert set(Y.vertices) <= set(X.vertices.tolist())


@pytest.mark.parametrize("g", [t3_graph(), grid_wired(1), grid_wired(2), wired_from_edges(3, [(0, 1, 2), (1, 2, 1), (2, 0, 3), (1, 0, 1), (0, None, 1), (2, None, 2)])])
def test_two_exact_lerw_laws_agree(g):
    law = laplacian_walk_law(g, 0)
    assert sum(law.values()) == 1
    for steps, p in law.items():
        assert lerw_path_probability(g, steps, 0) == p


def test_t3_law_by_hand():
    # from 0: exit directly (1/2 + 1/2 * 1/2 * 1/2 + ...) vs. through vertex 1
    g = t3_graph()
    law = laplacian_walk_law(g, 0)
    direct = [p for s, p in law.items() if len(s) == 1]
    assert direct == [Fraction(2, 3)]


def _tv(counts, law, n):
    keys = set(counts) | set(law)
    return sum(abs(counts.get(k, 0) / n - float(law.get(k, 0))) for k in keys) / 2


@pytest.mark.parametrize("mode", ["forward", "backward", "mixed"])
def test_empirical_erasure_laws_match(mode):
    g = grid_wired(2)
    law = laplacian_walk_law(g, 0)
    rng = np.random.default_rng({"forward": 1, "backward": 2, "mixed": 3}[mode])
    sets = (np.array([False, True, False, False]), np.array([False, False, True, True]))
    n = 20000
    c = Counter()
    for _ in range(n):
        X = run_walk(g, 0, rng=rng)
        if mode == "forward":
            Y = forward_le(X)
        elif mode == "backward":
            Y = backward_le(X)
        else:
            Y = mixed_le(X, schedule(X, sets))
        c[Y.steps] += 1
    assert _tv(c, law, n) < 0.03


def test_quasiloop_scan_finds_a_hairpin():
    up = np.column_stack([np.zeros(11), np.linspace(0, 1, 11)])
    down = np.column_stack([np.full(11, 0.05), np.linspace(1, 0, 11)])
    hits = scan_quasiloops(np.vstack([up, down]), 0.1, 0.5)
    assert hits and hits[0].diameter >= 0.5 and hits[0].closing <= 0.1
    straight = np.column_stack([np.linspace(0, 2, 21), np.zeros(21)])
    assert scan_quasiloops(straight, 0.1, 0.5) == []
