from collections import Counter, defaultdict
from fractions import Fraction

import numpy as np
import pytest

from ustmix.erasure import forward_le
from ustmix.lattice import grid_wired, t3_graph
from ustmix.loopsoup import (
    attach_loops,
    attach_small_loops,
    enumerate_loops,
    enumerate_walks,
    loops_along,
    sample_soup,
    split_loop,
    tail_mass,
    total_mass_by_length,
)


def dense_q(g, region):
    idx = sorted(region)
    loc = {v: k for k, v in enumerate(idx)}
    Q = np.zeros((len(idx), len(idx)))
    for s in range(len(g.targets)):
        a, b = int(g.rows[s]), int(g.targets[s])
        if a in loc and b in loc:
            Q[loc[a], loc[b]] += g.probs[s]
    return Q


REGIONS = [
    ("t3", t3_graph(), {0, 1}),
    ("grid2", grid_wired(2), {0, 1, 2, 3}),
    ("grid3-six", grid_wired(3), {0, 1, 2, 3, 4, 5}),
]


@pytest.mark.parametrize("name,g,region", REGIONS)
def test_unrooted_masses_sum_to_trace_over_length(name, g, region):
    loops = enumerate_loops(g, region, L_max=8, exact=True)
    by_len = defaultdict(Fraction)
    for lp, m in loops:
        by_len[lp.length] += m
    Q = dense_q(g, region)
    for n in range(1, 9):
        exact = total_mass_by_length(g, region, n, exact=True)
        assert by_len.get(n, Fraction(0)) == exact
        assert abs(float(exact) - np.trace(np.linalg.matrix_power(Q, n)) / n) < 1e-12


def test_total_mass_is_minus_log_det():
    g = grid_wired(2)
    region = set(range(4))
    loops = enumerate_loops(g, region, L_max=8, exact=False)
    head = sum(float(m) for _, m in loops)
    Q = dense_q(g, region)
    total = -np.linalg.slogdet(np.eye(4) - Q)[1]
    assert abs(head + tail_mass(g, region, 8) - total) < 1e-12


def test_loops_stay_in_the_region():
    g = grid_wired(3)
    region = {0, 1, 3, 4}
    for lp, _ in enumerate_loops(g, region, L_max=6):
        assert set(lp.vertices) <= region


def test_split_loop_keeps_every_excursion():
    rng = np.random.default_rng(0)
    lv = [0, 1, 0, 2, 0, 1, 3, 1, 0]
    ls = list(range(8))
    parts = split_loop(lv, ls, rng)
    assert all(v[0] == v[-1] == 0 for v, _ in parts)
    assert sorted(s for _, steps in parts for s in steps) == ls
    assert split_loop([5], [], rng) == []


def conditional_walk_law(g, gamma_steps, max_len=24):
    walks = enumerate_walks(g, 0, max_len)
    law = {w: p for w, p in walks.items() if forward_le(_as_walk(g, w)).steps == gamma_steps}
    z = sum(law.values())
    return {w: p / z for w, p in law.items()}


def _as_walk(g, slots):
    from ustmix.walk import EXITED, WalkPath

    verts = [0] + [int(g.targets[s]) for s in slots]
    return WalkPath(g, verts, list(slots), EXITED)


def _tv(c, law, n):
    keys = set(c) | set(law)
    return sum(abs(c.get(k, 0) / n - float(law.get(k, 0))) for k in keys) / 2


def test_attach_loops_gives_the_conditional_walk_law_on_t3():
    g = t3_graph()
    direct = [s for s in range(g.indptr[0], g.indptr[1]) if g.targets[s] == g.n][0]
    gamma = forward_le(_as_walk(g, (direct,)))
    law = conditional_walk_law(g, gamma.steps)
    loops = enumerate_loops(g, None, L_max=8, exact=False)
    rng = np.random.default_rng(4)
    n = 20000
    c = Counter(tuple(attach_loops(gamma, sample_soup(g, None, 8, rng=rng, loops=loops), rng).slots.tolist()) for _ in range(n))
    assert _tv(c, law, n) < 0.03


def test_loops_along_is_exact_on_the_grid():
    g = grid_wired(2)
    rng = np.random.default_rng(5)
    # a fixed erased path 0 -> 1 -> cemetery
    s01 = [s for s in range(g.indptr[0], g.indptr[1]) if g.targets[s] == 1][0]
    s1x = [s for s in range(g.indptr[1], g.indptr[2]) if g.targets[s] == g.n][0]
    gamma = forward_le(_as_walk(g, (s01, s1x)))
    law = conditional_walk_law(g, gamma.steps, max_len=14)
    n = 20000
    c = Counter()
    for _ in range(n):
        w = attach_small_loops(g, gamma, loops_along(g, gamma, rng))
        assert forward_le(w) == gamma
        c[tuple(w.slots.tolist())] += 1
    # the enumerated law is truncated at length 14; unseen long walks carry little mass
    assert _tv(c, law, n) < 0.04
