import math
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ustmix.geometry import Disc
from ustmix.lattice import DomainSpec, discretize, grid_wired, lattice_for
from ustmix.stats import (
    INF,
    CoarseKey,
    CoarseSampler,
    Empirical,
    RestrictionKey,
    event_bound_check,
    rn_report,
    stability_experiment,
    tree_restriction,
    tv_distance,
)
from ustmix.ust import exact_tree_distribution, tree_from_key

laws = st.dictionaries(st.integers(0, 6), st.integers(1, 50), min_size=1, max_size=7)


@settings(max_examples=200, deadline=None)
@given(P=laws, Q=laws, R=laws)
def test_tv_is_a_metric(P, Q, R):
    assert tv_distance(P, P) == 0
    assert math.isclose(tv_distance(P, Q), tv_distance(Q, P))
    assert 0 <= tv_distance(P, Q) <= 1
    assert tv_distance(P, R) <= tv_distance(P, Q) + tv_distance(Q, R) + 1e-12


def test_empirical_merge_matches_pooled_counts():
    a, b = [1, 1, 2], [2, 3]
    assert Empirical.of(a).merge(Empirical.of(b)).counts == dict(Counter(a + b))
    assert Empirical.of(np.array([4, 4, 5])).counts == {4: 2, 5: 1}
    with pytest.raises(ValueError):
        Empirical.of([])


def test_exact_ratios_and_captured_mass():
    nu1 = {"A": Fraction(1, 3), "B": Fraction(2, 3)}
    nu2 = {"A": Fraction(1, 2), "B": Fraction(1, 3), "C": Fraction(1, 6)}
    rep = rn_report(nu1, nu2, smoothing=0, C_grid=(1.25, 1.5, 2.0))
    assert rep.ratios == {"A": Fraction(2, 3), "B": Fraction(2), "C": 0}
    assert rep.captured1[1.25] == 0 and rep.captured1[1.5] == pytest.approx(1 / 3)
    assert rep.captured1[2.0] == pytest.approx(1.0) and rep.captured2[2.0] == pytest.approx(5 / 6)
    assert rep.min_C(0.9) == INF and rep.min_C(0.8) == 2.0


def test_unseen_keys_get_the_infinite_sentinel():
    rep = rn_report({"A": 3, "B": 1}, {"A": 2}, smoothing=0)
    assert rep.ratios["B"] == INF
    assert all(rep.captured1[C] <= 0.75 + 1e-12 for C in rep.C_grid)
    smooth = rn_report({"A": 3, "B": 1}, {"A": 2}, smoothing=0.5)
    assert math.isfinite(smooth.ratios["B"])


def test_identical_exact_laws_are_captured_at_one():
    g = grid_wired(2)
    law = exact_tree_distribution(g)
    region = np.zeros(g.n, bool)
    region[:2] = True
    restr = {}
    for key, p in law.items():
        k = tree_restriction(g, tree_from_key(g, key).parent, region)
        restr[k] = restr.get(k, 0) + p
    rep = rn_report(restr, dict(restr), smoothing=0)
    assert rep.captured1[rep.C_grid[0]] == 1.0 and rep.min_C() == rep.C_grid[0]
    assert RestrictionKey("tree", g, tree_from_key(g, next(iter(law))).parent, region) in restr
    with pytest.raises(ValueError):
        RestrictionKey("colour")


def test_event_envelopes():
    P = {0: 5, 1: 3, 2: 2}
    Q = {0: 4, 1: 4, 2: 2}
    rep = event_bound_check(P, Q, [("zero", lambda k: k == 0), ("small", lambda k: k <= 1), lambda k: True])
    assert rep.names[2] == "<lambda>"
    assert rep.pairs == [(0.5, 0.4), (0.8, 0.8), (1.0, 1.0)]
    assert rep.envelope_holds()


def test_coarse_keys_decode_and_are_reproducible():
    spec = DomainSpec(Disc((0, 0), 1.0), marked=(1.0, 0.0))
    g = discretize(lattice_for(spec, 1 / 8), spec)
    cs = CoarseSampler(g, Disc((0, 0), 0.4), k=3, n_sectors=4)
    a = cs.sample(500, seed=7, chunk=128)
    b = cs.sample(500, seed=7, chunk=128)
    assert np.array_equal(a, b) and len(a) == 500
    for code in np.unique(a):
        labels, sectors = cs.key.decode(int(code))
        assert labels[0] == 0 and all(0 <= s < 4 for s in sectors)
        # labels are canonical: a new label is one more than the largest so far
        assert all(lab <= max(labels[:i], default=-1) + 1 for i, lab in enumerate(labels))
    with pytest.raises(ValueError):
        CoarseKey(3, 4).decode(-1)


def test_same_domain_is_stable():
    D = DomainSpec(Disc((0, 0), 1.0), marked=(1.0, 0.0))
    out = stability_experiment(D, D, Disc((0, 0), 0.3), [1 / 8], n=4000, seed=1)
    rep = out[1 / 8]
    assert rep.min_C() <= 1.5
