"""Temperley superposition graph, tree/dimer bijection and winding heights.

The primal graph is the wired graph with its boundary contacts split into
one vertex per boundary edge (placed at the crossing point) plus one vertex
at the marked boundary point. Consecutive boundary vertices are joined by
arcs of the boundary, ending at the marked point. These boundary-path
edges only serve to cut the outside into faces; they carry no
intersection vertex. The face that contains the marked point is the
reference dual vertex.

Vertex numbering of a :class:`SuperpositionGraph`: primal vertices first
(interior ``0..n-1``, boundary ``n..n+M-1`` in boundary order, marked point
``n+M``), then one dual vertex per face, then one intersection vertex per
non-path edge. Primal and dual vertices are black, intersections white.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .geometry import Disc, Polygon, _wrap, turning_angle, winding_around, winding_from_start
from .lattice import WiredGraph
from .ust import SpanningTree

MAX_ENUMERATION_VERTICES = 64


# --- winding -----------------------------------------------------------------


@dataclass(frozen=True)
class WindingValue:
    angle: float
    turns: tuple  # per-segment contributions, in order

    @property
    def in_turns(self) -> float:
        return self.angle / (2 * math.pi)


def winding(polyline, reference="start") -> WindingValue:
    """Topological winding of a polyline.

    ``reference`` is a point z (winding around z), ``"start"`` (winding seen
    from the curve's own first point) or ``"intrinsic"`` (sum of turning
    angles between consecutive segments).
    """
    pts = np.asarray(polyline, float).reshape(-1, 2)
    if isinstance(reference, str):
        if reference == "intrinsic":
            d = np.diff(pts, axis=0)
            d = d[np.hypot(d[:, 0], d[:, 1]) > 0]
            ang = np.arctan2(d[:, 1], d[:, 0])
            parts = tuple(float(t) for t in _wrap(np.diff(ang)))
            return WindingValue(turning_angle(pts), parts)
        if reference == "start":
            total = winding_from_start(pts)
            d = pts[1:] - pts[0]
            ang = np.arctan2(d[:, 1], d[:, 0])
            return WindingValue(total, tuple(float(t) for t in _wrap(np.diff(ang))))
        raise ValueError(f"unknown winding reference {reference!r}")
    total = winding_around(pts, reference)
    d = pts - np.asarray(reference, float)
    ang = np.arctan2(d[:, 1], d[:, 0])
    return WindingValue(total, tuple(float(t) for t in _wrap(np.diff(ang))))


# --- boundary arcs -------------------------------------------------------------


def boundary_point(shape, s: float) -> np.ndarray:
    """Point at arc-length coordinate ``s`` (mod perimeter)."""
    if isinstance(shape, Disc):
        th = (s / shape.radius) % (2 * math.pi)
        return np.array([shape.center[0] + shape.radius * math.cos(th), shape.center[1] + shape.radius * math.sin(th)])
    if isinstance(shape, Polygon):
        P = shape.perimeter
        s = s % P
        i = int(np.searchsorted(shape._cum, s, side="right")) - 1
        i = min(max(i, 0), len(shape._pts) - 1)
        a = shape._pts[i]
        b = shape._pts[(i + 1) % len(shape._pts)]
        L = shape._cum[i + 1] - shape._cum[i]
        u = (s - shape._cum[i]) / L if L else 0.0
        return a + u * (b - a)
    raise TypeError(f"no explicit boundary parametrisation for {type(shape).__name__}")


def boundary_arc(shape, s0: float, s1: float, step: Optional[float] = None) -> np.ndarray:
    """Boundary polyline from coordinate ``s0`` forward to ``s1`` (``s1 >= s0``)."""
    if s1 < s0:
        raise ValueError("arc must run forward")
    pts = [boundary_point(shape, s0)]
    if isinstance(shape, Polygon):
        P = shape.perimeter
        k0 = math.floor(s0 / P)
        for k in range(k0, math.floor(s1 / P) + 1):
            for c in shape._cum[:-1]:
                t = k * P + c
                if s0 < t < s1:
                    pts.append(boundary_point(shape, t))
    else:
        h = step or shape.radius * 2 * math.pi / 720
        m = int(math.ceil((s1 - s0) / h))
        for j in range(1, m):
            pts.append(boundary_point(shape, s0 + (s1 - s0) * j / m))
    pts.append(boundary_point(shape, s1))
    out = [pts[0]]
    for p in pts[1:]:
        if np.linalg.norm(p - out[-1]) > 1e-14:
            out.append(p)
    return np.asarray(out)


def _centroid(poly: np.ndarray) -> np.ndarray:
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    c = x * yn - xn * y
    A = c.sum() / 2
    if abs(A) < 1e-15:
        return poly.mean(axis=0)
    return np.array([((x + xn) * c).sum() / (6 * A), ((y + yn) * c).sum() / (6 * A)])


def _interior_point(poly: np.ndarray) -> np.ndarray:
    """Centroid when it lies inside, else the deepest point of a sample grid."""
    c = _centroid(poly)
    shape = Polygon(tuple(map(tuple, poly)))
    if shape.contains(c):
        return c
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    best, best_d = None, -1.0
    for x in np.linspace(lo[0], hi[0], 41)[1:-1]:
        for y in np.linspace(lo[1], hi[1], 41)[1:-1]:
            p = np.array([x, y])
            if shape.contains(p):
                d = _dist_to_closed(p, poly)
                if d > best_d:
                    best, best_d = p, d
    if best is None:
        raise ArithmeticError("could not place a dual vertex inside its face")
    return best


def _dist_to_closed(p, poly):
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    L2 = np.einsum("ij,ij->i", ab, ab)
    u = np.clip(np.einsum("ij,ij->i", p - a, ab) / np.where(L2 > 0, L2, 1), 0, 1)
    q = a + u[:, None] * ab
    return float(np.min(np.hypot(q[:, 0] - p[0], q[:, 1] - p[1])))


# --- superposition -------------------------------------------------------------


@dataclass
class PrimalEdge:
    a: int
    b: int
    kind: str  # "interior" | "boundary" | "path"
    polyline: np.ndarray
    slots: tuple  # (slot a->b or -1, slot b->a or -1) in the wired kernel


class SuperpositionGraph:
    """Superposition of a wired planar graph and its dual."""

    def __init__(self, graph: WiredGraph):
        dom = graph.domain
        if dom is None or dom.marked is None:
            raise ValueError("superposition needs a domain with a marked boundary point")
        shape = dom.shape
        if not getattr(shape, "simply_connected", True):
            raise ValueError("superposition needs a simply connected domain")
        self.graph = graph
        self.shape = shape
        n = graph.n
        M = len(graph.boundary)
        self.n_interior = n
        self.n_boundary = M
        self.marked = n + M
        self.n_primal = n + M + 1
        origin = dom.origin
        P = shape.perimeter
        pos = np.zeros((self.n_primal, 2))
        pos[:n] = graph.positions
        for k, b in enumerate(graph.boundary):
            pos[n + k] = b.point
        pos[n + M] = dom.marked
        self.primal_pos = pos

        # undirected primal edges
        edges: list[PrimalEdge] = []
        seen = {}
        for s in range(len(graph.targets)):
            v = int(graph.rows[s])
            e = int(graph.edge_ids[s])
            t = int(graph.targets[s])
            if t == n:
                k = graph.boundary_rank[e]
                edges.append(PrimalEdge(v, n + k, "boundary", graph.edge_geometry(e), (s, -1)))
                continue
            key = (min(v, t), max(v, t))
            if key in seen:
                pe = edges[seen[key]]
                if pe.a == v:
                    raise ValueError(f"parallel edges between {v} and {t}")
                pe.slots = (pe.slots[0], s)
                continue
            seen[key] = len(edges)
            edges.append(PrimalEdge(v, t, "interior", graph.edge_geometry(e), (s, -1)))
        chain = [b.coord for b in graph.boundary] + [P]
        for k in range(M):
            arc = boundary_arc(shape, origin + chain[k], origin + chain[k + 1])
            nxt = n + k + 1  # the last one lands on the marked point
            edges.append(PrimalEdge(n + k, nxt, "path", arc, (-1, -1)))
        self.edges = edges
        self._faces()
        self._intersections()

    # faces by tracing darts: dart 2i runs a->b, 2i+1 runs b->a
    def _faces(self):
        E = self.edges
        nd = 2 * len(E)
        origin_of = np.empty(nd, dtype=np.int64)
        angle = np.empty(nd)
        for i, e in enumerate(E):
            pl = e.polyline
            origin_of[2 * i], origin_of[2 * i + 1] = e.a, e.b
            d0 = pl[1] - pl[0]
            d1 = pl[-2] - pl[-1]
            angle[2 * i] = math.atan2(d0[1], d0[0])
            angle[2 * i + 1] = math.atan2(d1[1], d1[0])
        rot = [[] for _ in range(self.n_primal)]
        for d in range(nd):
            rot[origin_of[d]].append(d)
        pos_in = np.empty(nd, dtype=np.int64)
        for v, ds in enumerate(rot):
            ds.sort(key=lambda d: angle[d])
            for j, d in enumerate(ds):
                pos_in[d] = j
        self.rotation = rot
        self.dart_origin = origin_of

        def nxt(d):
            tw = d ^ 1
            v = origin_of[tw]
            ds = rot[v]
            return ds[(pos_in[tw] - 1) % len(ds)]

        face_of = np.full(nd, -1, dtype=np.int64)
        faces = []
        for d0 in range(nd):
            if face_of[d0] >= 0:
                continue
            cyc = []
            d = d0
            while face_of[d] < 0:
                face_of[d] = len(faces)
                cyc.append(d)
                d = nxt(d)
            if d != d0:
                raise ArithmeticError("face tracing did not close")
            faces.append(cyc)
        self.left_face = face_of
        self.face_darts = faces
        areas = [self._signed_area(cyc) for cyc in faces]
        outer = [f for f, a in enumerate(areas) if a < 0]
        if len(outer) != 1:
            raise ValueError("primal embedding is not a connected plane graph (non-simply-connected domain?)")
        V, E_ = self.n_primal, len(self.edges)
        if V - E_ + len(faces) != 2:
            raise ValueError("Euler characteristic mismatch: domain is not simply connected")
        self.ref_face = outer[0]
        self.n_faces = len(faces)
        dpos = np.zeros((len(faces), 2))
        for f, cyc in enumerate(faces):
            dpos[f] = _interior_point(self._dart_polygon(cyc)) if f != self.ref_face else self._ref_position(cyc)
        self.dual_pos = dpos

    def _dart_points(self, d):
        pl = self.edges[d >> 1].polyline
        return pl if d % 2 == 0 else pl[::-1]

    def _dart_polygon(self, cyc):
        return np.vstack([self._dart_points(d)[:-1] for d in cyc])

    def _signed_area(self, cyc):
        p = self._dart_polygon(cyc)
        x, y = p[:, 0], p[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def _ref_position(self, cyc):
        # the non-path stretch of the outer walk, closed through the marked point
        is_path = [self.edges[d >> 1].kind == "path" for d in cyc]
        k = len(cyc)
        starts = [i for i in range(k) if not is_path[i] and is_path[i - 1]]
        if len(starts) != 1:
            raise ValueError("reference face is not bounded by a single boundary arc")
        i0 = starts[0]
        run = []
        i = i0
        while not is_path[i % k]:
            run.append(cyc[i % k])
            i += 1
        pts = np.vstack([self._dart_points(d)[:-1] for d in run] + [self._dart_points(run[-1])[-1:]])
        a = self.shape.coordinate(pts[-1])
        b = self.shape.coordinate(pts[0])
        if b < a:
            b += self.shape.perimeter
        arc = boundary_arc(self.shape, a, b)
        poly = np.vstack([pts, arc[1:-1]])
        return _interior_point(poly)

    def _intersections(self):
        n_p, F = self.n_primal, self.n_faces
        self.dual_base = n_p
        self.white_base = n_p + F
        whites = []  # undirected edge index per intersection vertex
        self.white_of_edge = {}
        for i, e in enumerate(self.edges):
            if e.kind != "path":
                self.white_of_edge[i] = self.white_base + len(whites)
                whites.append(i)
        self.white_edges = whites
        nv = self.white_base + len(whites)
        self.n_vertices = nv
        pos = np.zeros((nv, 2))
        pos[:n_p] = self.primal_pos
        pos[n_p : n_p + F] = self.dual_pos
        g = self.graph
        half = []  # (black, white, weight)
        for j, i in enumerate(whites):
            e = self.edges[i]
            pl = e.polyline
            seg = np.linalg.norm(np.diff(pl, axis=0), axis=1)
            cum = np.concatenate([[0], np.cumsum(seg)])
            t = cum[-1] / 2
            m = int(np.searchsorted(cum, t, side="right")) - 1
            m = min(m, len(seg) - 1)
            u = (t - cum[m]) / seg[m]
            w = self.white_base + j
            pos[w] = pl[m] + u * (pl[m + 1] - pl[m])
            for end, s in ((e.a, e.slots[0]), (e.b, e.slots[1])):
                wt = Fraction(0) if s < 0 else g.edge_prob_exact(int(g.edge_ids[s]))
                if end >= self.n_interior:
                    wt = Fraction(1)
                half.append((end, w, wt))
            for d in (2 * i, 2 * i + 1):
                half.append((n_p + int(self.left_face[d]), w, Fraction(1)))
        self.pos = pos
        self.half_edges = half
        self.half_index = {}
        for h, (b, w, _) in enumerate(half):
            self.half_index.setdefault((b, w), h)
        self.removed = frozenset(range(self.n_interior, n_p)) | {n_p + self.ref_face}

    # -- queries --

    def kind(self, v: int) -> str:
        if v < self.n_primal:
            return "primal"
        return "dual" if v < self.white_base else "intersection"

    def face_vertex(self, f: int) -> int:
        return self.dual_base + f

    def reduced(self) -> "BipartiteGraph":
        black = [v for v in range(self.white_base) if v not in self.removed]
        white = list(range(self.white_base, self.n_vertices))
        edges = []
        for b, w, wt in self.half_edges:
            if b not in self.removed and wt != 0:
                edges.append((b, w, wt))
        return BipartiteGraph(black, white, edges, {v: tuple(self.pos[v]) for v in black + white})

    def counts(self) -> dict:
        red = self.n_vertices - len(self.removed)
        return {
            "primal": self.n_primal,
            "dual": self.n_faces,
            "intersection": len(self.white_edges),
            "removed": len(self.removed),
            "reduced": red,
            "half_edges": len(self.half_edges),
        }


def build_superposition(graph: WiredGraph) -> SuperpositionGraph:
    return SuperpositionGraph(graph)


# --- matchings -----------------------------------------------------------------


@dataclass(frozen=True)
class Matching:
    sup: SuperpositionGraph = field(repr=False, compare=False, hash=False)
    half_edges: frozenset

    def pairs(self) -> list:
        return sorted(self.sup.half_edges[h][:2] for h in self.half_edges)

    def partner(self) -> dict:
        out = {}
        for h in self.half_edges:
            b, w, _ = self.sup.half_edges[h]
            out[b] = w
            out[w] = b
        return out

    def weight(self) -> Fraction:
        w = Fraction(1)
        for h in self.half_edges:
            w *= self.sup.half_edges[h][2]
        return w

    def key(self) -> tuple:
        return tuple(sorted(self.half_edges))

    def to_text(self) -> str:
        return "".join(f"{b} {w}\n" for b, w in self.pairs())


def _undirected_of_slot(sup: SuperpositionGraph) -> dict:
    out = {}
    for i, e in enumerate(sup.edges):
        for s in e.slots:
            if s >= 0:
                out[int(s)] = i
    return out


def tree_to_dimer(tree: SpanningTree, sup: SuperpositionGraph) -> Matching:
    """Primal vertices match along their parent edge, faces along the dual tree."""
    if tree.graph is not sup.graph:
        raise ValueError("tree lives on a different graph")
    of_slot = _undirected_of_slot(sup)
    chosen = []
    in_tree = set()
    for x in range(sup.n_interior):
        i = of_slot[int(tree.parent[x])]
        in_tree.add(i)
        chosen.append(sup.half_index[(x, sup.white_of_edge[i])])
    adj = {f: [] for f in range(sup.n_faces)}
    for i in sup.white_edges:
        if i in in_tree:
            continue
        f, g = int(sup.left_face[2 * i]), int(sup.left_face[2 * i + 1])
        adj[f].append((g, i))
        adj[g].append((f, i))
    seen = {sup.ref_face}
    stack = [sup.ref_face]
    while stack:
        f = stack.pop()
        for g, i in adj[f]:
            if g in seen:
                continue
            seen.add(g)
            stack.append(g)
            chosen.append(sup.half_index[(sup.face_vertex(g), sup.white_of_edge[i])])
    if len(seen) != sup.n_faces or len(chosen) != len(sup.white_edges):
        raise ValueError("complement of the tree is not a dual spanning tree")
    return Matching(sup, frozenset(chosen))


def dimer_to_tree(matching: Matching, sup: SuperpositionGraph) -> SpanningTree:
    partner = {}
    for h in matching.half_edges:
        b, w, _ = sup.half_edges[h]
        if b in sup.removed:
            raise ValueError(f"matching uses removed vertex {b}")
        if b in partner or w in partner:
            raise ValueError("matching covers a vertex twice")
        partner[b] = w
        partner[w] = b
    if len(partner) != sup.n_vertices - len(sup.removed):
        raise ValueError("matching is not perfect on the reduced graph")
    parent = np.empty(sup.n_interior, dtype=np.int64)
    for x in range(sup.n_interior):
        e = sup.edges[sup.white_edges[partner[x] - sup.white_base]]
        s = e.slots[0] if e.a == x else e.slots[1]
        if s < 0:
            raise ValueError(f"vertex {x} is matched along an edge it cannot use")
        parent[x] = s
    tree = SpanningTree(sup.graph, parent)
    if tree_to_dimer(tree, sup).half_edges != matching.half_edges:
        raise ValueError("dual half of the matching does not follow the dual tree")
    return tree


# --- counting ---------------------------------------------------------------------


class BipartiteGraph:
    """Black/white vertex lists plus weighted edges ``(black, white, weight)``."""

    def __init__(self, black, white, edges, positions=None):
        self.black = list(black)
        self.white = list(white)
        self.edges = [(b, w, wt) for b, w, wt in edges]
        self.positions = positions or {}

    @property
    def n_vertices(self) -> int:
        return len(self.black) + len(self.white)

    def _prepared(self, max_vertices):
        if self.n_vertices > max_vertices:
            raise ValueError(f"{self.n_vertices} vertices exceed the enumeration guard {max_vertices}")
        pos = self.positions
        key = (lambda v: (pos[v][0], pos[v][1], v)) if pos else (lambda v: v)
        black = sorted(self.black, key=key)
        white = sorted(self.white, key=key)
        wbit = {w: 1 << j for j, w in enumerate(white)}
        adj = {b: [] for b in black}
        for b, w, wt in self.edges:
            adj[b].append((wbit[w], wt, w))
        return black, white, adj


def count_matchings(g, weighted: bool = False, max_vertices: int = MAX_ENUMERATION_VERTICES):
    """Number (or total weight) of perfect matchings, by memoised sweep."""
    if isinstance(g, SuperpositionGraph):
        g = g.reduced()
    if len(g.black) != len(g.white):
        return Fraction(0) if weighted else 0
    black, _, adj = g._prepared(max_vertices)
    memo = {}
    one = Fraction(1) if weighted else 1

    def go(i, used):
        if i == len(black):
            return one
        k = (i, used)
        if k in memo:
            return memo[k]
        tot = 0 * one
        for bit, wt, _ in adj[black[i]]:
            if not used & bit:
                sub = go(i + 1, used | bit)
                if sub:
                    tot += sub * (wt if weighted else 1)
        memo[k] = tot
        return tot

    import sys

    old = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old, 4 * len(black) + 100))
    try:
        return go(0, 0)
    finally:
        sys.setrecursionlimit(old)


def enumerate_matchings(g, max_vertices: int = MAX_ENUMERATION_VERTICES):
    """Yield every perfect matching as a list of ``(black, white, weight)``."""
    if isinstance(g, SuperpositionGraph):
        g = g.reduced()
    if len(g.black) != len(g.white):
        return
    black, _, adj = g._prepared(max_vertices)
    chosen = []

    def go(i, used):
        if i == len(black):
            yield list(chosen)
            return
        b = black[i]
        for bit, wt, w in adj[b]:
            if not used & bit:
                chosen.append((b, w, wt))
                yield from go(i + 1, used | bit)
                chosen.pop()

    yield from go(0, 0)


def matching_from_pairs(sup: SuperpositionGraph, pairs) -> Matching:
    return Matching(sup, frozenset(sup.half_index[(b, w)] for b, w, *_ in pairs))


def dimer_distribution(sup: SuperpositionGraph, normalized: bool = True) -> dict:
    """Exact weighted law of perfect matchings, keyed by :meth:`Matching.key`."""
    law = {}
    for m in enumerate_matchings(sup):
        mm = matching_from_pairs(sup, m)
        law[mm.key()] = mm.weight()
    if normalized:
        Z = sum(law.values())
        law = {k: v / Z for k, v in law.items()}
    return law


def hexagon(a: int, b: int, c: int) -> BipartiteGraph:
    """Triangles of an a,b,c hexagon in the triangular lattice; up = black, down = white.

    Perfect matchings are lozenge tilings of the hexagon.
    """
    if min(a, b, c) < 1:
        raise ValueError("hexagon sides must be positive")
    e1 = np.array([1.0, 0.0])
    e2 = np.array([0.5, math.sqrt(3) / 2])
    steps = [(a, e1), (b, e2), (c, e2 - e1), (a, -e1), (b, -e2), (c, e1 - e2)]
    p = np.zeros(2)
    corners = []
    for m, d in steps:
        corners.append(tuple(p))
        p = p + m * d
    hexa = Polygon(tuple(corners))
    R = a + b + c + 1
    up, down, pos = {}, {}, {}
    for i in range(-R, R + 1):
        for j in range(-R, R + 1):
            o = i * e1 + j * e2
            cu = o + (e1 + e2) / 3
            cd = o + 2 * (e1 + e2) / 3
            if hexa.contains(cu):
                up[(i, j)] = ("u", i, j)
                pos[up[(i, j)]] = tuple(cu)
            if hexa.contains(cd):
                down[(i, j)] = ("d", i, j)
                pos[down[(i, j)]] = tuple(cd)
    edges = []
    for (i, j), u in up.items():
        for key in ((i, j), (i - 1, j), (i, j - 1)):
            if key in down:
                edges.append((u, down[key], 1))
    return BipartiteGraph(list(up.values()), list(down.values()), edges, pos)


def macmahon(a: int, b: int, c: int) -> int:
    """Number of lozenge tilings of the a,b,c hexagon (boxed plane partitions)."""
    if min(a, b, c) < 1:
        raise ValueError("macmahon needs a, b, c >= 1")
    r = Fraction(1)
    for i in range(1, a + 1):
        for j in range(1, b + 1):
            for k in range(1, c + 1):
                r *= Fraction(i + j + k - 1, i + j + k - 2)
    if r.denominator != 1:
        raise ArithmeticError("product is not an integer")
    return int(r)


# --- heights ------------------------------------------------------------------------


def reference_ray(sup: SuperpositionGraph, margin: Optional[float] = None) -> np.ndarray:
    """Path from the marked point out along the outward normal, then by
    axis-parallel moves around the domain onto the positive real axis.

    The returned polyline stops at a finite point of the real axis; the rest
    of the ray is accounted for exactly in :func:`height_field`.
    """
    shape = sup.shape
    x0, y0, x1, y1 = shape.bbox()
    span = max(x1 - x0, y1 - y0)
    m = margin if margin is not None else 0.25 * span
    s = sup.graph.domain.origin
    h = 1e-6 * shape.perimeter
    t = boundary_point(shape, s + h) - boundary_point(shape, s - h)
    nrm = np.array([t[1], -t[0]]) / np.hypot(t[0], t[1])  # boundary is counterclockwise
    start = np.asarray(sup.graph.domain.marked, float)
    # leave the bounding box along the normal
    lo = np.array([x0 - m, y0 - m])
    hi = np.array([x1 + m, y1 + m])
    ts = []
    for k in range(2):
        if nrm[k] > 1e-12:
            ts.append((hi[k] - start[k]) / nrm[k])
        elif nrm[k] < -1e-12:
            ts.append((lo[k] - start[k]) / nrm[k])
    p = start + min(ts) * nrm
    pts = [start, p]
    if p[0] < hi[0] - 1e-12:
        if p[1] < hi[1] - 1e-12 and p[1] > lo[1] + 1e-12:
            # left face of the box: go around the top or the bottom
            pts.append(np.array([p[0], hi[1] if p[1] > 0.5 * (lo[1] + hi[1]) else lo[1]]))
        pts.append(np.array([hi[0], pts[-1][1]]))
    pts.append(np.array([pts[-1][0], 0.0]))
    pts.append(np.array([max(pts[-1][0], 0.0) + m, 0.0]))
    out = [pts[0]]
    for q in pts[1:]:
        if np.linalg.norm(q - out[-1]) > 1e-14:
            out.append(q)
    ray = np.asarray(out)
    for a, b in zip(ray[:-1], ray[1:]):
        for u in np.linspace(0, 1, 65)[1:]:
            if shape.contains(a + u * (b - a)):
                raise ValueError("reference ray re-enters the domain; use a different marked point")
    return ray


@dataclass
class HeightField:
    sup: SuperpositionGraph = field(repr=False)
    faces: list  # (primal, white, dual, white) quads of the superposition
    centroids: np.ndarray
    heights: np.ndarray
    ray: np.ndarray = field(repr=False)

    def to_csv(self) -> str:
        lines = ["face,x,y,height"]
        for f, (c, h) in enumerate(zip(self.centroids, self.heights)):
            lines.append(f"{f},{float(c[0])!r},{float(c[1])!r},{float(h)!r}")
        return "\n".join(lines) + "\n"

    def on(self, shape) -> np.ndarray:
        """Indices of faces whose marked point lies in ``shape``."""
        return np.array([f for f, c in enumerate(self.centroids) if shape.contains(c)], dtype=np.int64)


def height_faces(sup: SuperpositionGraph) -> list:
    """Quads ``(p, I, d, I')`` around each interior primal vertex p, in counterclockwise order."""
    quads = []
    for p in range(sup.n_interior):
        ds = sup.rotation[p]
        for j, d1 in enumerate(ds):
            d2 = ds[(j + 1) % len(ds)]
            f = int(sup.left_face[d1])
            quads.append((p, sup.white_of_edge[d1 >> 1], sup.dual_base + f, sup.white_of_edge[d2 >> 1]))
    return quads


def _tail_polylines(tree: SpanningTree, sup: SuperpositionGraph, ray: np.ndarray, vertices=None) -> dict:
    """Per interior vertex: branch to the boundary, boundary arc to the marked point, reference ray."""
    g = sup.graph
    origin = g.domain.origin
    P = sup.shape.perimeter
    memo = {}

    def tail(v):
        if v in memo:
            return memo[v]
        chain = []
        u = v
        while u not in memo and u != g.n:
            chain.append(u)
            u = int(g.targets[tree.parent[u]])
        if u == g.n:
            last = chain[-1]
            e = int(g.edge_ids[tree.parent[last]])
            b = g.boundary_edge(e)
            arc = boundary_arc(sup.shape, origin + b.coord, origin + P)
            rest = np.vstack([arc, ray[1:]])
            memo[last] = np.vstack([g.edge_geometry(e)[:-1], rest])
            chain.pop()
        for w in reversed(chain):
            e = int(g.edge_ids[tree.parent[w]])
            nxt = memo[int(g.targets[tree.parent[w]])]
            memo[w] = np.vstack([g.edge_geometry(e)[:-1], nxt])
        return memo[v]

    return {v: tail(v) for v in (range(g.n) if vertices is None else vertices)}


def height_field(
    tree: SpanningTree,
    sup: SuperpositionGraph,
    diagonals: Optional[dict | Callable] = None,
    ray: Optional[np.ndarray] = None,
    faces=None,
) -> HeightField:
    """Winding field of the tree divided by 2*pi, one value per quad face.

    The curve for a face starts at its marked point (the quad centroid),
    follows the diagonal to the primal vertex, then the tree branch, the
    boundary to the marked boundary point and the reference ray to
    +infinity along the real axis. ``diagonals`` maps a face index (or is a
    callable on the quad) to a polyline from the centroid to the primal
    vertex; the default is the straight segment. ``faces`` restricts the
    computation to a list of face indices (the result then holds those
    faces only, in that order).
    """
    if tree.graph is not sup.graph:
        raise ValueError("tree lives on a different graph")
    ray = reference_ray(sup) if ray is None else np.asarray(ray, float)
    quads = height_faces(sup)
    if faces is not None:
        quads = [quads[int(f)] for f in faces]
    tails = _tail_polylines(tree, sup, ray, sorted({q[0] for q in quads}))
    end = ray[-1]
    if abs(end[1]) > 1e-12:
        raise ValueError("reference ray must end on the real axis")
    cents = np.array([sup.pos[list(q)].mean(axis=0) for q in quads])
    hs = np.empty(len(quads))
    for f, q in enumerate(quads):
        c = cents[f]
        p = q[0]
        if diagonals is None:
            diag = np.vstack([c, sup.pos[p]])
        elif callable(diagonals):
            diag = np.asarray(diagonals(q), float)
        else:
            fid = int(faces[f]) if faces is not None else f
            if fid not in diagonals:
                raise ValueError(f"no diagonal for face {fid}")
            diag = np.asarray(diagonals[fid], float)
        if np.linalg.norm(diag[0] - c) > 1e-12 or np.linalg.norm(diag[-1] - sup.pos[p]) > 1e-12:
            raise ValueError(f"diagonal of face {f} must run from its marked point to its primal vertex")
        w0 = winding_from_start(diag) if len(diag) > 2 else 0.0
        w1 = winding_around(np.vstack([diag[-1:], tails[p][1:]]), c)
        # arg(gamma - c) along the remaining ray to +infinity: from arg(end - c) to 0
        w2 = -math.atan2(end[1] - c[1], end[0] - c[0])
        hs[f] = (w0 + w1 + w2) / (2 * math.pi)
    return HeightField(sup, quads, cents, hs, ray)


def face_adjacency(sup: SuperpositionGraph, quads: Optional[list] = None) -> dict:
    """Superposition edges ``(black, white)`` shared by two height faces,
    restricted to edges of the reduced graph: edge -> (face, face)."""
    quads = height_faces(sup) if quads is None else quads
    by_edge = {}
    for f, q in enumerate(quads):
        for a, b in zip(q, q[1:] + q[:1]):
            e = (a, b) if b >= sup.white_base else (b, a)
            by_edge.setdefault(e, []).append(f)
    return {e: tuple(fs) for e, fs in by_edge.items() if len(fs) == 2 and e[0] not in sup.removed}


def dimer_height(matching: Matching, sup: SuperpositionGraph, omega: float = 0.25, quads: Optional[list] = None) -> np.ndarray:
    """Height function read directly off a matching.

    Crossing a superposition edge with its white end on the left changes
    the height by ``omega - [edge matched]``; the first face gets height 0.
    """
    quads = height_faces(sup) if quads is None else quads
    cents = np.array([sup.pos[list(q)].mean(axis=0) for q in quads])
    partner = matching.partner()
    adj = {f: [] for f in range(len(quads))}
    for (b, w), (f0, f1) in face_adjacency(sup, quads).items():
        u = sup.pos[b] - sup.pos[w]
        d = cents[f1] - cents[f0]
        s = 1.0 if u[0] * d[1] - u[1] * d[0] > 0 else -1.0
        step = s * (omega - (1.0 if partner.get(b) == w else 0.0))
        adj[f0].append((f1, step))
        adj[f1].append((f0, -step))
    h = np.full(len(quads), np.nan)
    for root in range(len(quads)):
        if not np.isnan(h[root]):
            continue
        h[root] = 0.0
        stack = [root]
        while stack:
            f = stack.pop()
            for g, step in adj[f]:
                if np.isnan(h[g]):
                    h[g] = h[f] + step
                    stack.append(g)
                elif abs(h[g] - h[f] - step) > 1e-9:
                    raise ValueError("matching height is not single-valued")
    return h


# --- sampling and pictures ----------------------------------------------------------


def sample_dimer(sup: SuperpositionGraph, rng=None) -> tuple:
    """A dimer configuration from a Wilson tree; returns (matching, tree)."""
    from .ust import wilson

    tree, _ = wilson(sup.graph, rng=rng, log=False)
    return tree_to_dimer(tree, sup), tree


def matching_svg(matching: Matching, width: int = 600) -> str:
    """Each dimer drawn as a short bar between its two vertices."""
    from .render import svg_document

    sup = matching.sup
    bars = [sup.pos[[b, w]] for b, w in matching.pairs()]
    cols = ["#1f77b4" if sup.kind(b) == "primal" else "#d62728" for b, _ in matching.pairs()]
    outline = sup.shape.boundary_polyline(256)
    return svg_document([outline] + bars, colors=["#888888"] + cols, width=width, stroke=3.0)


def height_svg(field_: HeightField, width: int = 600) -> str:
    from .render import svg_heat

    polys = [field_.sup.pos[list(q)] for q in field_.faces]
    return svg_heat(polys, field_.heights, width=width)
