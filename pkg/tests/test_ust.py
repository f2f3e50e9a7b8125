from collections import Counter

import numpy as np
import pytest
from scipy.stats import chisquare

from ustmix.geometry import Disc
from ustmix.lattice import DomainSpec, discretize, grid_wired, lattice_for, matrix_tree_weight, t3_graph, wired_from_edges
from ustmix.ust import (
    PartialTree,
    SpanningTree,
    exact_tree_distribution,
    finiteness_diagnostic,
    start_order,
    tree_from_key,
    tree_key,
    tree_svg,
    wilson,
    wilson_batch,
)


def test_exact_distribution_is_uniform_on_unweighted_grids():
    for k in (1, 2):
        g = grid_wired(k)
        law = exact_tree_distribution(g)
        assert len(law) == matrix_tree_weight(g)
        assert len(set(law.values())) == 1 and sum(law.values()) == 1


def test_exact_distribution_weights_oriented_edges():
    # vertex 0 prefers the cemetery 3:1, vertex 1 is neutral
    g = wired_from_edges(2, [(0, 1, 1), (0, None, 3), (1, 0, 1), (1, None, 1)])
    law = exact_tree_distribution(g, normalized=False)
    assert sorted(law.values()) == [1, 3, 3]


@pytest.mark.parametrize("g", [t3_graph(), grid_wired(2)])
def test_wilson_matches_the_exact_law(g):
    law = exact_tree_distribution(g)
    keys = sorted(law)
    n = 40000
    trees = wilson_batch(g, n, rng=1)
    c = Counter(tree_key(g, p) for p in trees)
    assert set(c) <= set(law)
    obs = np.array([c.get(k, 0) for k in keys])
    exp = np.array([float(law[k]) * n for k in keys])
    assert chisquare(obs, exp).pvalue > 0.001


def test_python_and_compiled_wilson_give_spanning_trees():
    spec = DomainSpec(Disc((0, 0), 1.0), marked=(1.0, 0.0))
    g = discretize(lattice_for(spec, 1 / 8), spec)
    rng = np.random.default_rng(3)
    t1, log = wilson(g, rng=rng)
    t2, _ = wilson(g, rng=rng, log=False)
    for t in (t1, t2):
        assert isinstance(t, SpanningTree)
        assert np.all(g.rows[t.parent] == np.arange(g.n))
    # every logged branch is the loop erasure of its walk
    from ustmix.erasure import forward_le

    for gen in log:
        if len(gen.walk):
            assert forward_le(gen.walk) == gen.branch


def test_tree_keys_round_trip():
    g = grid_wired(3)
    t, _ = wilson(g, rng=5, log=False)
    assert tree_from_key(g, t.key()) == t


def test_cycles_are_rejected():
    g = t3_graph()
    s01 = [s for s in range(g.indptr[0], g.indptr[1]) if g.targets[s] == 1][0]
    s10 = [s for s in range(g.indptr[1], g.indptr[2]) if g.targets[s] == 0][0]
    with pytest.raises(ValueError, match="cycle"):
        SpanningTree(g, [s01, s10])


def test_partial_tree_rejects_a_branch_that_does_not_land():
    g = grid_wired(2)
    pt = PartialTree(g)
    from ustmix.erasure import SimplePath

    s01 = [s for s in range(g.indptr[0], g.indptr[1]) if g.targets[s] == 1][0]
    with pytest.raises(ValueError):
        pt.add_branch(SimplePath((0, 1), (s01,), g))


def test_batch_is_reproducible():
    g = grid_wired(4)
    a = wilson_batch(g, 50, rng=11)
    b = wilson_batch(g, 50, rng=11)
    assert np.array_equal(a, b)


def test_start_orders():
    g = grid_wired(4)
    rm = start_order(g, "row-major")
    assert sorted(rm.tolist()) == list(range(g.n))
    net = start_order(g, "net", region=np.arange(g.n), k=3)
    assert len(set(net[:3].tolist())) == 3
    assert start_order(g, [5, 2])[:2].tolist() == [5, 2]
    with pytest.raises(ValueError):
        start_order(g, "spiral")


def test_finiteness_diagnostic_runs():
    g = grid_wired(6)
    rep = finiteness_diagnostic(g, np.arange(g.n), eps=10.0, k=2, rng=0, n_runs=5)
    assert rep.probability == 1.0
    rep = finiteness_diagnostic(g, np.arange(g.n), eps=0.0, k=0, rng=0, n_runs=5)
    assert rep.probability == 0.0


def test_tree_svg_draws_every_edge():
    g = grid_wired(3)
    t, _ = wilson(g, rng=2, log=False)
    svg = tree_svg(t)
    assert svg.startswith("<svg") and svg.count("<polyline") == g.n + 1
