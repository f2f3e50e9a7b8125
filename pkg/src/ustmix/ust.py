"""Wired uniform spanning trees via Wilson's algorithm."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from . import _exact, _kernels
from .erasure import SimplePath, forward_le
from .geometry import diameter
from .lattice import WiredGraph, _exact_weight
from .rng import kernel_seed, make_rng
from .walk import WalkPath, run_walk

STEP_CAP = 100_000_000


class SpanningTree:
    """One outgoing slot per interior vertex; the cemetery is the root."""

    def __init__(self, graph: WiredGraph, parent):
        self.graph = graph
        self.parent = np.asarray(parent, dtype=np.int64)
        self._check()

    def _check(self):
        g = self.graph
        if self.parent.shape != (g.n,):
            raise ValueError("parent array has the wrong shape")
        if np.any(g.rows[self.parent] != np.arange(g.n)):
            raise ValueError("parent slot does not leave its vertex")
        # every vertex must reach the root without revisiting
        state = np.zeros(g.n, dtype=np.int8)  # 0 new, 1 on stack, 2 done
        for v0 in range(g.n):
            v = v0
            trail = []
            while v < g.n and state[v] == 0:
                state[v] = 1
                trail.append(v)
                v = int(g.targets[self.parent[v]])
            if v < g.n and state[v] == 1:
                raise ValueError("parent pointers contain a cycle")
            state[trail] = 2

    @property
    def heads(self) -> np.ndarray:
        return self.graph.targets[self.parent]

    @property
    def edges(self) -> np.ndarray:
        return self.graph.edge_ids[self.parent]

    def key(self) -> tuple:
        """Canonical hashable form: sorted edge ids."""
        return tuple(sorted(int(e) for e in self.edges))

    def __eq__(self, other):
        return isinstance(other, SpanningTree) and other.graph is self.graph and np.array_equal(other.parent, self.parent)

    def __hash__(self):
        return hash(self.key())

    def branch(self, v: int) -> SimplePath:
        return branch(self, v)

    def weight(self, exact: bool = True):
        g = self.graph
        w = Fraction(1) if exact else 1.0
        for s in self.parent:
            w *= _exact.to_fraction(_exact_weight(g, int(s))) if exact else g.weights[s]
        return w

    def to_text(self) -> str:
        """Edge list: one ``tail head edge_id`` line per vertex (global ids, head -1 = root)."""
        g = self.graph
        lines = []
        for v in range(g.n):
            h = int(g.targets[self.parent[v]])
            hg = -1 if h == g.n else int(g.vertices[h])
            lines.append(f"{int(g.vertices[v])} {hg} {int(g.edge_ids[self.parent[v]])}")
        return "\n".join(lines) + "\n"


def branch(tree: SpanningTree, v: int) -> SimplePath:
    """Follow parent edges from ``v`` to the root."""
    g = tree.graph
    if not 0 <= v < g.n:
        raise ValueError(f"{v} is not an interior vertex")
    verts, steps = [v], []
    while v != g.n:
        s = int(tree.parent[v])
        steps.append(s)
        v = int(g.targets[s])
        verts.append(v)
    return SimplePath(tuple(verts), tuple(steps), g)


@dataclass
class Generation:
    start: int
    walk: WalkPath
    branch: SimplePath


@dataclass
class PartialTree:
    """Tree on a vertex subset, grown branch by branch."""

    graph: WiredGraph = field(repr=False)
    in_tree: np.ndarray = None
    parent: np.ndarray = None
    log: list = field(default_factory=list)

    def __post_init__(self):
        n = self.graph.n
        if self.in_tree is None:
            self.in_tree = np.zeros(n + 1, dtype=np.bool_)
            self.in_tree[n] = True
        if self.parent is None:
            self.parent = np.full(n, -1, dtype=np.int64)

    def copy(self) -> "PartialTree":
        return PartialTree(self.graph, self.in_tree.copy(), self.parent.copy(), list(self.log))

    def add_branch(self, br: SimplePath):
        for v, s in zip(br.vertices[:-1], br.steps):
            if self.in_tree[v]:
                raise ValueError("branch re-enters the tree before its end")
            self.in_tree[v] = True
            self.parent[v] = s
        if not self.in_tree[br.vertices[-1]]:
            raise ValueError("branch does not end on the tree")

    def grow(self, start: int, rng, step_cap: int = STEP_CAP) -> Generation:
        """One Wilson step from ``start``; returns the logged generation."""
        if self.in_tree[start]:
            gen = Generation(start, WalkPath(self.graph, [start], [], "hit-set"), SimplePath((start,), (), self.graph))
            self.log.append(gen)
            return gen
        walk = run_walk(self.graph, start, self.in_tree, rng, step_cap)
        if walk.terminal == "step-cap":
            raise RuntimeError(f"walk from {start} hit the step cap {step_cap}")
        br = forward_le(walk)
        self.add_branch(br)
        gen = Generation(start, walk, br)
        self.log.append(gen)
        return gen

    def vertices(self) -> np.ndarray:
        return np.flatnonzero(self.in_tree[: self.graph.n])

    def complete(self) -> SpanningTree:
        if not self.in_tree.all():
            raise ValueError("tree does not span")
        return SpanningTree(self.graph, self.parent)


def start_order(graph: WiredGraph, policy="row-major", region=None, k: int = 0, rng=None) -> np.ndarray:
    """Vertex order for Wilson's algorithm.

    ``policy`` is an explicit list, ``"row-major"`` (by y then x),
    ``"random"``, or ``"net"``: ``k`` farthest-point picks inside ``region``
    (a vertex list), then the rest of the region, then everything else.
    """
    n = graph.n
    if not isinstance(policy, str):
        order = [int(v) for v in policy]
        rest = sorted(set(range(n)) - set(order))
        return np.array(order + rest, dtype=np.int64)
    pos = graph.positions
    if policy == "row-major":
        return np.lexsort((pos[:, 0], pos[:, 1])).astype(np.int64)
    if policy == "random":
        return make_rng(rng).permutation(n).astype(np.int64)
    if policy == "net":
        reg = np.asarray(region if region is not None else np.arange(n), dtype=np.int64)
        net = farthest_points(pos[reg], k)
        picks = [int(reg[i]) for i in net]
        rest_reg = [int(v) for v in reg if v not in set(picks)]
        others = sorted(set(range(n)) - set(int(v) for v in reg))
        return np.array(picks + rest_reg + others, dtype=np.int64)
    raise ValueError(f"unknown policy {policy!r}")


def farthest_points(P: np.ndarray, k: int) -> list:
    """Greedy farthest-point order, starting next to the centroid."""
    if k <= 0 or len(P) == 0:
        return []
    first = int(np.argmin(np.hypot(*(P - P.mean(axis=0)).T)))
    picks = [first]
    d = np.hypot(*(P - P[first]).T)
    while len(picks) < min(k, len(P)):
        nxt = int(np.argmax(d))
        picks.append(nxt)
        d = np.minimum(d, np.hypot(*(P - P[nxt]).T))
    return picks


def wilson(graph: WiredGraph, order="row-major", rng=None, log: bool = True, step_cap: int = STEP_CAP, partial: Optional[PartialTree] = None):
    """Sample the wired UST. Returns (tree, generation log).

    With ``log=False`` the compiled kernel is used and the log is empty.
    """
    rng = make_rng(rng)
    order = start_order(graph, "row-major" if order is None else order, rng=rng)
    pt = partial.copy() if partial is not None else PartialTree(graph)
    if not log:
        res = _kernels.wilson(graph.indptr, graph.targets, graph.cum, order, pt.in_tree, pt.parent, step_cap, kernel_seed(rng))
        if res < 0:
            raise RuntimeError("a Wilson walk hit the step cap")
        return pt.complete(), []
    for v in order:
        if not pt.in_tree[v]:
            pt.grow(int(v), rng, step_cap)
    return pt.complete(), pt.log


def wilson_batch(graph: WiredGraph, n_runs: int, order="row-major", rng=None, step_cap: int = STEP_CAP) -> np.ndarray:
    """Parent-slot arrays of ``n_runs`` independent trees, shape (n_runs, n)."""
    rng = make_rng(rng)
    order = start_order(graph, order, rng=rng)
    out = _kernels.wilson_batch(graph.indptr, graph.targets, graph.cum, order, step_cap, kernel_seed(rng), n_runs)
    if n_runs and out[0, 0] == -2:
        raise RuntimeError("a Wilson walk hit the step cap")
    return out


def tree_key(graph: WiredGraph, parent) -> tuple:
    return tuple(sorted(int(e) for e in graph.edge_ids[parent]))


def tree_from_key(graph: WiredGraph, key) -> SpanningTree:
    """Inverse of :func:`tree_key`."""
    parent = np.full(graph.n, -1, dtype=np.int64)
    for e in key:
        s = graph.edge_slot[int(e)]
        v = int(graph.rows[s])
        if parent[v] >= 0:
            raise ValueError(f"vertex {v} has two parent edges")
        parent[v] = s
    if np.any(parent < 0):
        raise ValueError("key does not give every vertex a parent")
    return SpanningTree(graph, parent)


def exact_tree_distribution(graph: WiredGraph, max_vertices: int = 9, normalized: bool = True) -> dict:
    """Every oriented spanning tree with its exact probability (or weight)."""
    n = graph.n
    if n > max_vertices:
        raise ValueError(f"enumeration limited to {max_vertices} interior vertices (got {n})")
    choices = [range(graph.indptr[v], graph.indptr[v + 1]) for v in range(n)]
    wts = [_exact.to_fraction(_exact_weight(graph, k)) for k in range(len(graph.targets))]
    out = {}
    for parent in itertools.product(*choices):
        if not _acyclic(graph, parent):
            continue
        w = Fraction(1)
        for s in parent:
            w *= wts[s]
        out[tree_key(graph, list(parent))] = w
    if normalized:
        z = sum(out.values())
        out = {k: w / z for k, w in out.items()}
    return out


def _acyclic(graph, parent) -> bool:
    n = graph.n
    ok = [False] * (n + 1)
    ok[n] = True
    for v0 in range(n):
        v = v0
        seen = set()
        while not ok[v]:
            if v in seen:
                return False
            seen.add(v)
            v = int(graph.targets[parent[v]])
        for u in seen:
            ok[u] = True
    return True


# --- finiteness diagnostic ---------------------------------------------------------


@dataclass
class FinitenessReport:
    k: int
    eps: float
    n_runs: int
    max_component_diameter: list
    max_walk_range: list
    probability: float
    stderr: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _late_components(graph: WiredGraph, parent, late: np.ndarray) -> list:
    """Diameters of the connected pieces formed by the vertices in ``late``."""
    n = graph.n
    root = {}

    def find(v):
        while root[v] != v:
            root[v] = root[root[v]]
            v = root[v]
        return v

    for v in np.flatnonzero(late):
        root[int(v)] = int(v)
    ends = {}
    for v in root:
        h = int(graph.targets[parent[v]])
        if h < n and h in root:
            a, b = find(v), find(h)
            if a != b:
                root[a] = b
    for v in root:
        r = find(v)
        pts = ends.setdefault(r, [])
        pts.append(graph.position(v))
        h = int(graph.targets[parent[v]])
        if h < n:
            pts.append(graph.position(h))
        else:
            pts.append(np.asarray(graph.boundary_edge(int(graph.edge_ids[parent[v]])).point))
    return [diameter(np.array(p)) for p in ends.values()]


def finiteness_diagnostic(graph: WiredGraph, region, eps: float, k: int, rng=None, n_runs: int = 100) -> FinitenessReport:
    """How often the tree on ``region`` adds only eps-small pieces after k branches.

    Each run grows branches from ``k`` farthest-point starts in the region,
    then from the rest of the region. The run succeeds when every connected
    piece added after the first k branches, and every walk used for them,
    has diameter at most ``eps``.
    """
    rng = make_rng(rng)
    region = np.asarray(region, dtype=np.int64)
    order = start_order(graph, "net", region=region, k=k)[: len(region)]
    comp, rang = [], []
    for _ in range(n_runs):
        pt = PartialTree(graph)
        for v in order[:k]:
            pt.grow(int(v), rng)
        before = pt.in_tree[: graph.n].copy()
        walk_max = 0.0
        for v in order[k:]:
            gen = pt.grow(int(v), rng)
            if len(gen.walk):
                walk_max = max(walk_max, diameter(gen.walk.points()))
        late = pt.in_tree[: graph.n] & ~before
        d = _late_components(graph, pt.parent, late)
        comp.append(max(d, default=0.0))
        rang.append(walk_max)
    ok = np.mean([(c <= eps) and (w <= eps) for c, w in zip(comp, rang)])
    se = float(np.sqrt(ok * (1 - ok) / n_runs))
    return FinitenessReport(k, eps, n_runs, comp, rang, float(ok), se)


def tree_svg(tree: SpanningTree, width: int = 600) -> str:
    """Tree edges coloured by the boundary edge their branch drains through."""
    from .render import PALETTE, svg_document

    g = tree.graph
    heads = tree.heads
    root_of = np.full(g.n, -1, dtype=np.int64)
    for v0 in range(g.n):
        trail, v = [], v0
        while v < g.n and root_of[v] < 0:
            trail.append(v)
            v = int(heads[v])
        root_of[trail] = trail[-1] if v == g.n else root_of[v]
    rank = {int(r): i for i, r in enumerate(np.unique(root_of))}
    curves, colors = [], []
    if g.domain is not None:
        curves.append(g.domain.shape.boundary_polyline(256))
        colors.append("#888888")
    for v in range(g.n):
        curves.append(g.edge_geometry(int(g.edge_ids[tree.parent[v]])))
        colors.append(PALETTE[rank[int(root_of[v])] % len(PALETTE)])
    return svg_document(curves, colors=colors, width=width, stroke=2.0)
