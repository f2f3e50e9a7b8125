import itertools
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from ustmix.geometry import Disc, Polygon, Rectangle, Slit
from ustmix.lattice import (
    DomainSpec,
    discretize,
    dumps,
    graph_from_json,
    graph_to_json,
    grid_wired,
    lattice_for,
    matrix_tree_weight,
    t3_graph,
    wired_from_edges,
)
from ustmix.ust import exact_tree_distribution


def grid_tree_count(k: int) -> int:
    """Closed form: det(4I - A) of the k x k grid via the sine eigenbasis."""
    prod = 1.0
    for j in range(1, k + 1):
        for m in range(1, k + 1):
            prod *= 4 - 2 * math.cos(j * math.pi / (k + 1)) - 2 * math.cos(m * math.pi / (k + 1))
    return round(prod)


def brute_tree_weight(g) -> Fraction:
    """Sum over parent choices, cycle check written out independently."""
    total = Fraction(0)
    slots = [range(g.indptr[v], g.indptr[v + 1]) for v in range(g.n)]
    for parent in itertools.product(*slots):
        ok = True
        for v0 in range(g.n):
            v, steps = v0, 0
            while v != g.n and steps <= g.n:
                v = int(g.targets[parent[v]])
                steps += 1
            if v != g.n:
                ok = False
                break
        if ok:
            w = Fraction(1)
            for s in parent:
                w *= Fraction(g.weights[s]).limit_denominator(10**6)
            total += w
    return total


def small_graphs():
    yield "t3", t3_graph()
    yield "grid1", grid_wired(1)
    yield "grid2", grid_wired(2)
    yield "oriented", wired_from_edges(3, [(0, 1, 2), (1, 2, 3), (2, 0, 1), (0, None, 1), (2, None, 5), (1, 0, 1)])
    yield "disc", discretize(lattice_for(DomainSpec(Disc((0, 0), 0.6)), 0.5), DomainSpec(Disc((0, 0), 0.6)))
    slit = DomainSpec(Slit(Rectangle(0, 0, 3, 3), ((1.5, 0.0), (1.5, 1.6))))
    yield "slit", discretize(lattice_for(slit, 1.0), slit)


def test_grid_counts_match_closed_form():
    for k in (1, 2, 3, 4):
        assert matrix_tree_weight(grid_wired(k)) == grid_tree_count(k)
    assert matrix_tree_weight(grid_wired(2)) == 192


@pytest.mark.parametrize("name,g", list(small_graphs()))
def test_matrix_tree_equals_enumeration(name, g):
    assert g.n <= 8
    mt = matrix_tree_weight(g, exact=True)
    assert mt == brute_tree_weight(g)
    assert mt == sum(exact_tree_distribution(g, normalized=False).values())


def test_float_and_log_paths_agree():
    g = grid_wired(6)
    exact = matrix_tree_weight(g, exact=True)
    assert math.isclose(float(matrix_tree_weight(g, exact=False)), float(exact), rel_tol=1e-9)
    assert math.isclose(matrix_tree_weight(g, log=True), math.log(exact), rel_tol=1e-12)


def test_kernel_rows_are_stochastic():
    g = discretize(lattice_for(DomainSpec(Disc((0, 0), 1.0)), 1 / 8), DomainSpec(Disc((0, 0), 1.0)))
    sums = np.add.reduceat(g.probs, g.indptr[:-1])
    assert np.allclose(sums, 1.0)
    assert np.all(g.cum[g.indptr[1:] - 1] == 1.0)


def test_boundary_order_follows_the_boundary_on_a_convex_polygon():
    hexa = Polygon(tuple((math.cos(a) * 2, math.sin(a) * 2) for a in np.linspace(0, 2 * math.pi, 7)[:-1] + 0.1))
    spec = DomainSpec(hexa, marked=(2 * math.cos(0.1), 2 * math.sin(0.1)))
    g = discretize(lattice_for(spec, 0.25), spec)
    angles = np.array([math.atan2(b.point[1], b.point[0]) for b in g.boundary])
    angles = np.unwrap(angles)
    # counterclockwise traversal: angles never decrease (ties at shared crossing points)
    assert np.all(np.diff(angles) > -1e-9)
    assert angles[-1] - angles[0] < 2 * math.pi


def test_lattice_points_on_the_boundary_are_not_interior():
    # the sides of the square run through lattice points; only the open 3 x 3 block is interior
    spec = DomainSpec(Rectangle(0.0, 0.0, 2.0, 2.0))
    g = discretize(lattice_for(spec, 0.5), spec)
    assert all(spec.contains(p) for p in g.positions)
    assert g.n == 9


def test_json_round_trip_is_exact():
    spec = DomainSpec(Disc((0.1, -0.2), 1 / 3), marked=(0.1 + 1 / 3, -0.2))
    g = discretize(lattice_for(spec, 1 / 7), spec)
    text = graph_to_json(g)
    h = graph_from_json(text)
    assert graph_to_json(h) == text
    assert np.array_equal(g.probs, h.probs)
    assert np.array_equal(g.edge_ids, h.edge_ids)


def test_dumps_uses_seventeen_digits_and_rejects_nan():
    x = 0.1 + 0.2
    assert json.loads(dumps({"x": x}))["x"] == x
    with pytest.raises(ValueError):
        dumps([float("nan")])


def test_unknown_domain_keys_are_rejected():
    with pytest.raises(ValueError, match="unknown domain keys"):
        DomainSpec.from_dict({"shape": {"kind": "disc", "radius": 1.0}, "colour": "red"})
