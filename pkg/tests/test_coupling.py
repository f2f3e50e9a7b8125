import itertools
import math
from fractions import Fraction

import numpy as np
import pytest

from ustmix.coupling import (
    CouplingConfig,
    CouplingSetup,
    DomainMap,
    annulus_exact,
    check_Er,
    concentric_discs,
    epsilon_good,
    lower_coupling_experiment,
    sample_Er_branch,
    upper_coupling_experiment,
)
from ustmix.geometry import Disc, Rectangle
from ustmix.lattice import DomainSpec, grid_wired
from ustmix.ust import exact_tree_distribution
from ustmix.walk import HIT_SET, WalkPath


@pytest.fixture(scope="module")
def cfg():
    return concentric_discs(mesh=1 / 16, r=0.1)


def test_nesting_and_gaps_are_checked():
    with pytest.raises(ValueError, match="gap"):
        concentric_discs(mesh=1 / 16, r=0.3)
    with pytest.raises(ValueError, match="inside"):
        CouplingConfig(
            D1=DomainSpec(Disc((0, 0), 1.0), marked=(1.0, 0.0)),
            D2=DomainSpec(Disc((0, 0), 1.5), marked=(1.5, 0.0)),
            U=Disc((0, 0), 0.5),
            U1=Disc((0, 0), 0.3),
            U2=Disc((0, 0), 0.7),
            U3=Disc((0, 0), 0.85),
            mesh=1 / 16,
        )


def test_config_round_trip_is_strict(cfg):
    d = cfg.to_dict()
    assert CouplingConfig.from_dict(d).to_dict() == d
    with pytest.raises(ValueError, match="unknown"):
        CouplingConfig.from_dict({**d, "radius": 2})


def test_domain_map_is_identity_inside_and_invertible(cfg):
    phi = DomainMap.for_config(cfg)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.5, 1.5, (500, 2))
    pts = pts[np.hypot(*pts.T) < 1.5]
    assert phi.roundtrip_error(pts) < 1e-12
    inner = pts[np.hypot(*pts.T) < cfg.U3.radius]
    assert np.allclose(phi(inner), inner)
    rim = np.array([[1.5, 0.0], [0.0, -1.5]])
    assert np.allclose(np.hypot(*phi(rim).T), 1.0)
    twisted = DomainMap.for_config(cfg, twist=1)
    assert twisted.roundtrip_error(pts) < 1e-9


def test_rectangles_use_the_axis_map():
    c = CouplingConfig(
        D1=DomainSpec(Rectangle(-1, -1, 1, 1), marked=(1.0, 0.0)),
        D2=DomainSpec(Rectangle(-2, -1.5, 2, 1.5), marked=(2.0, 0.0)),
        U=Rectangle(-0.2, -0.2, 0.2, 0.2),
        U1=Rectangle(-0.4, -0.4, 0.4, 0.4),
        U2=Rectangle(-0.6, -0.6, 0.6, 0.6),
        U3=Rectangle(-0.8, -0.8, 0.8, 0.8),
        mesh=1 / 16,
    )
    phi = DomainMap.for_config(c)
    assert phi.kind == "axis"
    assert np.allclose(phi([[2.0, 1.5], [-2.0, 0.0]]), [[1.0, 1.0], [-1.0, 0.0]])


def test_sampled_branch_satisfies_the_event(cfg):
    setup = CouplingSetup(cfg)
    br, rep = sample_Er_branch(cfg, rng=3, setup=setup)
    assert rep.accepted
    ok, t, fr = check_Er(br, cfg.D1, cfg.r, cfg.mesh)
    assert ok and fr <= cfg.r and t == rep.t
    # a branch that exits straight away never traces the boundary
    ok, _, _ = check_Er(br.__class__(br.vertices[-2:], br.steps[-1:], br.graph), cfg.D1, cfg.r, cfg.mesh)
    assert not ok


def test_identical_domains_always_agree():
    same = concentric_discs(R2=1.0, mesh=1 / 16, r=0.1)
    assert same.identical
    rep = upper_coupling_experiment(same, 6, seed=1)
    assert rep.frequency("agree_U")[0] == 1.0 and rep.frequency("agree_U1")[0] == 1.0


def test_coupling_runs_are_reproducible_across_threads(cfg):
    setup = CouplingSetup(cfg)
    a = upper_coupling_experiment(cfg, 4, seed=2, threads=1, setup=setup)
    b = upper_coupling_experiment(cfg, 4, seed=2, threads=2, setup=setup)
    assert a.to_csv() == b.to_csv()
    low = lower_coupling_experiment(cfg, 4, seed=2, setup=setup)
    s = low.summary()
    assert s["n_runs"] == 4 and "d_X2_Y2" in s and "good" in s


def test_goodness_flags_a_long_hairpin(cfg):
    setup = CouplingSetup(cfg)
    g = setup.g1
    # walk straight right from the centre and back: a quasiloop of diameter > eps
    pos = g.positions
    row = np.flatnonzero(np.abs(pos[:, 1]) < 1e-9)
    row = row[np.argsort(pos[row, 0])]
    row = row[(pos[row, 0] >= 0) & (pos[row, 0] <= 0.5)]
    verts = np.concatenate([row, row[::-1][1:]])
    slots = []
    for a, b in zip(verts[:-1], verts[1:]):
        slots.append(next(s for s in range(g.indptr[a], g.indptr[a + 1]) if g.targets[s] == b))
    w = WalkPath(g, verts, np.array(slots), HIT_SET)
    assert epsilon_good(w, cfg).failing == "quasiloop"


def _product_comparison(g, regions):
    """Direct tabulation over all spanning trees, independent of the module code."""
    law = exact_tree_distribution(g)
    tails = {int(e): int(g.rows[k]) for k, e in enumerate(g.edge_ids)}
    joint = {}
    for key, p in law.items():
        parts = tuple(frozenset(e for e in key if tails[e] in R) for R in regions)
        joint[parts] = joint.get(parts, 0) + p
    margs = []
    for j in range(len(regions)):
        m = {}
        for parts, p in joint.items():
            m[parts[j]] = m.get(parts[j], 0) + p
        margs.append(m)
    tv = Fraction(0)
    C = 1.0
    for combo in itertools.product(*[m.items() for m in margs]):
        q = math.prod((p for _, p in combo), start=Fraction(1))
        p = joint.get(tuple(c for c, _ in combo), Fraction(0))
        tv += abs(p - q)
        if p:
            C = max(C, float(p / q), float(q / p))
    return C, float(tv / 2)


@pytest.mark.parametrize("pairs", [[([0], [0])], [([0, 1], [0]), ([3], [3])]])
def test_annulus_exact_against_direct_tabulation(pairs):
    g = grid_wired(2)
    cmp_ = annulus_exact(g, pairs)
    outer = set().union(*[set(a) for a, _ in pairs])
    regions = [set(range(g.n)) - outer] + [set(b) for _, b in pairs]
    C, tv = _product_comparison(g, regions)
    assert math.isclose(cmp_.C, C) and math.isclose(cmp_.tv, tv)
    assert cmp_.C > 1 and cmp_.missing > 0
