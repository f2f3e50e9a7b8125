import itertools
import math
from collections import defaultdict

import numpy as np
import pytest

from ustmix.dimer import (
    build_superposition,
    count_matchings,
    dimer_distribution,
    dimer_height,
    dimer_to_tree,
    enumerate_matchings,
    height_field,
    hexagon,
    macmahon,
    matching_svg,
    sample_dimer,
    tree_to_dimer,
    winding,
)
from ustmix.lattice import grid_wired, matrix_tree_weight
from ustmix.ust import exact_tree_distribution, tree_from_key


def plane_partitions(a, b, c):
    """Brute force: a x b arrays with entries in 0..c, weakly decreasing along rows and columns."""
    count = 0
    for vals in itertools.product(range(c + 1), repeat=a * b):
        M = np.array(vals).reshape(a, b)
        if np.all(np.diff(M, axis=0) <= 0) and np.all(np.diff(M, axis=1) <= 0):
            count += 1
    return count


def test_macmahon_small_values():
    assert macmahon(1, 1, 1) == 2
    assert macmahon(2, 2, 2) == 20
    for a, b, c in [(1, 2, 3), (2, 2, 1), (2, 3, 2)]:
        assert macmahon(a, b, c) == plane_partitions(a, b, c)


@pytest.mark.parametrize("abc", [(1, 1, 1), (1, 2, 1), (2, 2, 2), (1, 2, 3)])
def test_hexagon_tilings_are_plane_partitions(abc):
    assert count_matchings(hexagon(*abc)) == macmahon(*abc)


def test_winding_references():
    th = np.linspace(0, 2 * math.pi, 101)
    circle = np.column_stack([np.cos(th), np.sin(th)])
    assert math.isclose(winding(circle, (0.0, 0.0)).angle, 2 * math.pi, rel_tol=1e-9)
    assert math.isclose(winding(circle, (3.0, 0.0)).angle, 0.0, abs_tol=1e-9)
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0], [1, 0]], float)
    assert math.isclose(winding(square, "intrinsic").angle, 2 * math.pi, rel_tol=1e-9)
    with pytest.raises(ValueError):
        winding(square, "sideways")


@pytest.mark.parametrize("k", [1, 2])
def test_temperley_bijection_on_small_squares(k):
    g = grid_wired(k)
    sup = build_superposition(g)
    law = exact_tree_distribution(g)
    assert count_matchings(sup) == matrix_tree_weight(g) == len(law)
    seen = set()
    for key in law:
        t = tree_from_key(g, key)
        m = tree_to_dimer(t, sup)
        assert dimer_to_tree(m, sup) == t
        seen.add(m.key())
    assert len(seen) == len(law)
    # the pushforward of the tree law is the dimer law
    push = defaultdict(int)
    for key, p in law.items():
        push[tree_to_dimer(tree_from_key(g, key), sup).key()] += p
    assert dict(push) == dimer_distribution(sup)


def test_enumerated_matchings_are_perfect():
    sup = build_superposition(grid_wired(1))
    red = sup.reduced()
    for m in enumerate_matchings(sup):
        bs = [b for b, _, _ in m]
        ws = [w for _, w, _ in m]
        assert sorted(bs) == sorted(red.black) and sorted(ws) == sorted(red.white)


def test_height_matches_dimer_height_on_the_one_square():
    g = grid_wired(1)
    sup = build_superposition(g)
    for key in exact_tree_distribution(g):
        t = tree_from_key(g, key)
        h = height_field(t, sup).heights
        d = dimer_height(tree_to_dimer(t, sup), sup)
        shift = h - d
        assert np.allclose(shift, shift[0], atol=1e-9)


def test_height_fractional_part_does_not_depend_on_the_tree():
    g = grid_wired(2)
    sup = build_superposition(g)
    fracs = []
    for key in list(exact_tree_distribution(g))[:40]:
        h = height_field(tree_from_key(g, key), sup).heights
        fracs.append(np.round(h % 1.0, 9) % 1.0)
    assert all(np.allclose(f, fracs[0], atol=1e-8) for f in fracs)


def test_sampled_dimers_and_pictures():
    sup = build_superposition(grid_wired(3))
    m, t = sample_dimer(sup, rng=4)
    assert dimer_to_tree(m, sup) == t
    assert matching_svg(m).startswith("<svg")
