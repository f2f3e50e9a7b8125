import math

import numpy as np
import pytest

from ustmix.geometry import Disc
from ustmix.lattice import DomainSpec, discretize, grid_wired, lattice_for, t3_graph
from ustmix.walk import (
    EXITED,
    HIT_SET,
    ConditioningFailure,
    CrossingRect,
    HTransform,
    WalkPath,
    ZeroProbabilityError,
    conditioned_walk,
    estimate_crossing,
    estimate_harmonic_measure,
    exit_distribution,
    exit_through,
    hit_at,
    rectangles_following,
    run_walk,
    schedule,
)


def disc_graph(mesh=1 / 8, radius=1.0):
    spec = DomainSpec(Disc((0.0, 0.0), radius), marked=(radius, 0.0))
    return discretize(lattice_for(spec, mesh), spec)


def boundary_slot_of(g, v):
    return [s for s in range(g.indptr[v], g.indptr[v + 1]) if g.targets[s] == g.n][0]


def test_walk_ends_in_the_cemetery_and_steps_are_consistent():
    g = disc_graph()
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = run_walk(g, g.nearest((0, 0)), rng=rng)
        assert p.terminal == EXITED and p.exited
        assert np.array_equal(g.targets[p.slots], p.vertices[1:])
        assert np.array_equal(g.rows[p.slots], p.vertices[:-1])
        assert g.boundary_flag[p.exit_edge]


def test_first_step_frequencies_follow_the_kernel():
    g = grid_wired(3)
    v = 4  # centre vertex, four neighbours
    rng = np.random.default_rng(2)
    counts = np.zeros(4)
    for _ in range(4000):
        p = run_walk(g, v, stop=np.ones(g.n, bool), rng=rng)
        counts[p.slots[0] - g.indptr[v]] += 1
    chi2 = ((counts - 1000) ** 2 / 1000).sum()
    assert chi2 < 16.3  # 0.999 quantile, 3 dof


def test_stop_set_halts_the_walk():
    g = grid_wired(4)
    stop = np.zeros(g.n, bool)
    stop[[0, 15]] = True
    p = run_walk(g, 5, stop=stop, rng=3)
    assert p.terminal in (HIT_SET, EXITED)
    if p.terminal == HIT_SET:
        assert stop[p.end]
    assert not stop[p.vertices[1:-1]].any()


def test_exit_distribution_single_vertex_is_uniform():
    ex = exit_distribution(grid_wired(1), 0)
    assert np.allclose(ex[ex > 0], 0.25) and math.isclose(ex.sum(), 1.0)


def test_exit_distribution_matches_monte_carlo():
    g = grid_wired(3)
    ex = exit_distribution(g, 0)
    rng = np.random.default_rng(5)
    n = 20000
    counts = np.zeros(len(g.targets))
    for _ in range(n):
        p = run_walk(g, 0, rng=rng)
        counts[p.slots[-1]] += 1
    se = np.sqrt(ex * (1 - ex) / n)
    assert np.all(np.abs(counts / n - ex) <= 4.5 * se + 1e-12)


def test_htransform_probability_on_t3():
    # P(leave through vertex 1's edge | start at 0) solves h0 = h1/2, h1 = 1/2 + h0/2
    g = t3_graph()
    cond = exit_through(g, int(g.edge_ids[boundary_slot_of(g, 1)]))
    ht = HTransform(g, cond)
    assert math.isclose(ht.probability(0), 1 / 3, rel_tol=1e-12)
    assert math.isclose(ht.probability(1), 2 / 3, rel_tol=1e-12)


def test_conditioned_walk_law_on_t3():
    # given success, the number of 0-1 round trips before the exit is geometric with ratio 1/4
    g = t3_graph()
    cond = exit_through(g, int(g.edge_ids[boundary_slot_of(g, 1)]))
    rng = np.random.default_rng(7)
    n = 20000
    lengths = np.array([len(conditioned_walk(g, 0, cond, method="exact", rng=rng)) for _ in range(n)])
    assert np.all(lengths % 2 == 0)
    k = (lengths - 2) // 2
    for j in range(3):
        p = 0.75 * 0.25**j
        assert abs(np.mean(k == j) - p) < 4.5 * math.sqrt(p * (1 - p) / n)


def test_rejection_and_exact_agree_on_the_conditioned_law():
    g = grid_wired(3)
    target = 8
    cond = hit_at(g, target, [2, 6, 8])
    rng = np.random.default_rng(11)
    a = [len(conditioned_walk(g, 0, cond, method="exact", rng=rng)) for _ in range(3000)]
    b = [len(conditioned_walk(g, 0, cond, method="rejection", rng=rng)) for _ in range(3000)]
    for p in (a, b):
        assert all(x >= 4 for x in p)
    assert abs(np.mean(a) - np.mean(b)) < 5 * math.sqrt(np.var(a) / 3000 + np.var(b) / 3000)


def test_impossible_conditions_raise():
    g = t3_graph()
    # leaving through vertex 1's edge is impossible if 1 is absorbing
    cond = exit_through(g, int(g.edge_ids[boundary_slot_of(g, 1)]), stop=[1])
    with pytest.raises(ZeroProbabilityError):
        conditioned_walk(g, 0, cond, method="exact", rng=0)
    with pytest.raises(ConditioningFailure):
        conditioned_walk(g, 0, cond, method="rejection", rng=0, max_tries=50)


def test_schedule_alternates_between_the_two_sets():
    g = grid_wired(5)
    # a hand-made path along the bottom row and back
    verts = [0, 1, 2, 3, 4, 3, 2, 1, 0]
    slots = []
    for a, b in zip(verts[:-1], verts[1:]):
        slots.append([s for s in range(g.indptr[a], g.indptr[a + 1]) if g.targets[s] == b][0])
    path = WalkPath(g, verts, slots, HIT_SET)
    odd = np.zeros(g.n, bool)
    odd[4] = True
    even = np.zeros(g.n, bool)
    even[1] = True
    sch = schedule(path, (odd, even))
    assert sch.times == [0, 4, 7, 8]
    assert sch.i_max == 2


def test_rectangles_chain_along_a_curve():
    curve = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    rects = rectangles_following(curve, 0.25)
    assert np.allclose(rects[0].a, curve[0])
    assert np.allclose(rects[-1].b, curve[-1])
    for r, s in zip(rects[:-1], rects[1:]):
        assert r.b == s.a
    assert all(0.125 - 1e-9 <= 2 * r.width <= 0.25 * 1.5 + 1e-9 for r in rects)


def test_placed_rectangle_geometry():
    r = CrossingRect.placed((0.0, 0.0), 1.0, "h")
    assert math.isclose(r.width, 1.0)
    assert r.contains(np.array([[1.5, 0.5]]))[0]
    assert not r.contains(np.array([[1.5, 1.2]]))[0]
    assert r.in_start(np.array([[0.5, 0.5]]))[0] and r.in_target(np.array([[2.5, 0.5]]))[0]


def test_harmonic_estimate_matches_the_exact_exit_law():
    g = disc_graph(1 / 16)
    v = g.nearest((0, 0))
    w = np.array([math.cos(0.7), math.sin(0.7)])
    rep = estimate_harmonic_measure(g, v, w, 0.5, 0.75, n=20000, rng=1)
    ex = exit_distribution(g, v)
    near = [g.edge_slot[b.edge] for b in g.boundary if math.hypot(b.point[0] - w[0], b.point[1] - w[1]) < 0.5]
    assert abs(rep.estimate - ex[near].sum()) < 4 * rep.stderr


def test_crossing_estimate_is_a_probability_and_reproducible():
    g = disc_graph(1 / 32)
    a = estimate_crossing(g, (-0.375, -0.125), 0.25, n=4000, rng=9)
    b = estimate_crossing(g, (-0.375, -0.125), 0.25, n=4000, rng=9, threads=2)
    assert 0 < a.estimate < 1
    assert a.estimate == b.estimate
