"""Loop erasure: forward, backward, mixed, and the loop-reversal bijection.

Paths are handled as a vertex sequence plus a parallel step sequence
(CSR slots when the path comes from a WalkPath). Keeping the steps makes
the erasures meaningful on multigraphs and lets the reversal map be checked
to preserve the multiset of steps, hence the walk weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional

import numpy as np

from . import _exact
from .geometry import diameter
from .lattice import WiredGraph
from .walk import HIT_SET, StoppingSchedule, WalkPath


@dataclass(frozen=True)
class SimplePath:
    vertices: tuple
    steps: Optional[tuple] = None
    graph: Optional[WiredGraph] = None

    def __post_init__(self):
        if len(set(self.vertices)) != len(self.vertices):
            raise ValueError("simple path repeats a vertex")
        if self.steps is not None and len(self.steps) != max(len(self.vertices) - 1, 0):
            raise ValueError("steps do not match vertices")

    def __len__(self):
        return len(self.vertices) - 1

    def __eq__(self, other):
        if not isinstance(other, SimplePath):
            return NotImplemented
        return self.vertices == other.vertices and self.steps == other.steps

    def __hash__(self):
        return hash((self.vertices, self.steps))

    @property
    def edges(self) -> tuple:
        if self.graph is None or self.steps is None:
            raise ValueError("edge ids need a graph-backed path")
        return tuple(int(e) for e in self.graph.edge_ids[list(self.steps)])

    def geometry(self) -> np.ndarray:
        return self.as_walk().geometry()

    def points(self) -> np.ndarray:
        return self.as_walk().points()

    def as_walk(self) -> WalkPath:
        if self.graph is None:
            raise ValueError("geometry needs a graph-backed path")
        return WalkPath(self.graph, list(self.vertices), list(self.steps), HIT_SET)


def _unpack(path):
    if isinstance(path, WalkPath):
        return [int(v) for v in path.vertices], [int(s) for s in path.slots], path.graph
    if isinstance(path, SimplePath):
        return list(path.vertices), list(path.steps) if path.steps is not None else None, path.graph
    verts = list(path)
    return verts, None, None


def _pack(verts, steps, graph):
    return SimplePath(tuple(verts), tuple(steps) if steps is not None else None, graph)


# --- decompositions ------------------------------------------------------------
#
# A loop is a pair (vertices, steps) with vertices[0] == vertices[-1].


def forward_decomposition(verts, steps):
    """Last-exit decomposition: X = l_0 e_0 l_1 e_1 ... l_m.

    Returns (gamma vertices, gamma steps, loops), where l_j is the portion of
    X between its first arrival at gamma_j and its last visit there.
    """
    last = {}
    for t, v in enumerate(verts):
        last[v] = t
    gv, gs, loops = [], [], []
    t = 0
    T = len(verts) - 1
    while True:
        v = verts[t]
        s = last[v]
        gv.append(v)
        loops.append((verts[t : s + 1], steps[t:s] if steps is not None else None))
        if s == T:
            break
        if steps is not None:
            gs.append(steps[s])
        t = s + 1
    return gv, (gs if steps is not None else None), loops


def backward_decomposition(verts, steps):
    """First-entrance decomposition: X = l'_0 e_0 l'_1 ... l'_m.

    l'_j runs from the first visit of gamma_j to the step entering
    gamma_{j+1} for the first time.
    """
    first = {}
    for t, v in enumerate(verts):
        first.setdefault(v, t)
    gv, gs, loops = [], [], []
    end = len(verts) - 1
    while True:
        f = first[verts[end]]
        gv.append(verts[end])
        loops.append((verts[f : end + 1], steps[f:end] if steps is not None else None))
        if f == 0:
            break
        if steps is not None:
            gs.append(steps[f - 1])
        end = f - 1
    gv.reverse()
    loops.reverse()
    if steps is not None:
        gs.reverse()
    return gv, (gs if steps is not None else None), loops


def _fle(verts, steps):
    gv, gs, _ = forward_decomposition(verts, steps)
    return gv, gs


def _ble(verts, steps):
    gv, gs, _ = backward_decomposition(verts, steps)
    return gv, gs


def forward_le(path) -> SimplePath:
    """Chronological loop erasure."""
    verts, steps, g = _unpack(path)
    return _pack(*_fle(verts, steps), g)


def backward_le(path) -> SimplePath:
    """Loop erasure of the time-reversed path, read forward again."""
    verts, steps, g = _unpack(path)
    return _pack(*_ble(verts, steps), g)


def _schedule_times(sched, T):
    times = list(sched.times if isinstance(sched, StoppingSchedule) else sched)
    if not times or times[0] != 0:
        times = [0] + times
    if times[-1] != T:
        raise ValueError(f"schedule ends at {times[-1]}, path at {T}")
    if any(b <= a for a, b in zip(times[:-1], times[1:])):
        raise ValueError("schedule times must increase strictly")
    return times


def _mixed_step(yv, ys, verts, steps, Ti, Tn):
    """One induction step; returns (s_i, t_i)."""
    seg = set(verts[Ti : Tn + 1])
    si = next(k for k, v in enumerate(yv) if v in seg)
    target = yv[si]
    ti = max(t for t in range(Ti, Tn + 1) if verts[t] == target)
    return si, ti


def mixed_le(path, sched) -> SimplePath:
    """Mixed loop erasure with respect to the times of ``sched``.

    ``Y_1 = bLE(X[0,T_1])`` and ``Y_{i+1} = Y_i[0,s_i] + bLE(X[t_i,T_{i+1}])``.
    """
    verts, steps, g = _unpack(path)
    T = len(verts) - 1
    times = _schedule_times(sched, T)
    if T == 0:
        return _pack(verts, steps, g)
    yv, ys = _ble(verts[: times[1] + 1], steps[: times[1]] if steps is not None else None)
    for Ti, Tn in zip(times[1:-1], times[2:]):
        si, ti = _mixed_step(yv, ys, verts, steps, Ti, Tn)
        bv, bs = _ble(verts[ti : Tn + 1], steps[ti:Tn] if steps is not None else None)
        yv = yv[:si] + bv
        if steps is not None:
            ys = ys[:si] + bs
    return _pack(yv, ys, g)


# --- loop reversal ----------------------------------------------------------------


def _excursions(lv, ls):
    """Split a loop at x into its excursions from x."""
    x = lv[0]
    cuts = [0] + [t for t in range(1, len(lv)) if lv[t] == x]
    return [(lv[a : b + 1], ls[a:b]) for a, b in zip(cuts[:-1], cuts[1:])]


def _concat(parts, root):
    v, s = [root], []
    for pv, ps in parts:
        v += pv[1:]
        s += ps
    return v, s


def _rotate(lv, ls, t):
    """Rotate a loop to start at its vertex index t."""
    return lv[t:] + lv[1 : t + 1], ls[t:] + ls[:t]


def _swap(lx, ly):
    """Trade which of x, y must avoid the other.

    In: l_x avoids a set B, l_y avoids B and x. Out: l'_x avoids B and y,
    l'_y avoids B. The multiset of steps is preserved and the map is a
    bijection between the two families.
    """
    xv, xs = lx
    yv, ys = ly
    x, y = xv[0], yv[0]
    exc = _excursions(xv, xs)
    hits = [k for k, (ev, _) in enumerate(exc) if y in ev]
    if not hits:
        return lx, ly
    head = exc[: hits[0]]
    out_x = _concat(head, x)
    tv, ts = list(yv), list(ys)
    bounds = hits + [len(exc)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        ev, es = exc[a]
        last_y = max(t for t, v in enumerate(ev) if v == y)
        bv, bs = _concat(exc[a:b], x)
        rv, rs = _rotate(bv, bs, last_y)
        tv += rv[1:]
        ts += rs
    return out_x, (tv, ts)


def _unswap(lx, ly):
    """Inverse of ``_swap``."""
    xv, xs = lx
    yv, ys = ly
    x, y = xv[0], yv[0]
    exc = _excursions(yv, ys)
    hits = [k for k, (ev, _) in enumerate(exc) if x in ev]
    if not hits:
        return lx, ly
    out_y = _concat(exc[: hits[0]], y)
    tv, ts = list(xv), list(xs)
    bounds = hits + [len(exc)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        bv, bs = _concat(exc[a:b], y)
        last_x = max(t for t, v in enumerate(bv) if v == x)
        rv, rs = _rotate(bv, bs, last_x)
        tv += rv[1:]
        ts += rs
    return (tv, ts), out_y


def reverse_loops(verts, steps):
    """Rearrange a path so that its backward erasure is its forward erasure.

    Loops of the last-exit decomposition avoid earlier erasure vertices;
    bubble-sorting the avoidance order with ``_swap`` produces loops that
    avoid later ones, i.e. a first-entrance decomposition of the same
    erasure. The final vertex keeps its (trivial) loop.
    """
    gv, gs, loops = forward_decomposition(verts, steps)
    m = len(gv) - 1
    loops = [(list(lv), list(ls)) for lv, ls in loops]
    order = list(range(m))
    for p in range(m):
        for k in range(m - 1 - p):
            i, j = order[k], order[k + 1]
            loops[i], loops[j] = _swap(loops[i], loops[j])
            order[k], order[k + 1] = j, i
    out_v, out_s = [], []
    for j in range(m + 1):
        lv, ls = loops[j]
        out_v += lv
        out_s += ls
        if j < m:
            out_s.append(gs[j])
    return out_v, out_s


def unreverse_loops(verts, steps):
    """Inverse of ``reverse_loops``."""
    gv, gs, loops = backward_decomposition(verts, steps)
    m = len(gv) - 1
    loops = [(list(lv), list(ls)) for lv, ls in loops]
    order = list(range(m))
    swaps = []
    for p in range(m):
        for k in range(m - 1 - p):
            swaps.append((order[k], order[k + 1]))
            order[k], order[k + 1] = order[k + 1], order[k]
    for i, j in reversed(swaps):
        loops[i], loops[j] = _unswap(loops[i], loops[j])
    out_v, out_s = [], []
    for j in range(m + 1):
        lv, ls = loops[j]
        out_v += lv
        out_s += ls
        if j < m:
            out_s.append(gs[j])
    return out_v, out_s


def reversal_map(path, sched):
    """Measure-preserving rearrangement with mixed_le(output) = forward_le(input).

    Segment ``[0, T_1]`` and then each ``[t_i, T_{i+1}]`` (computed against
    the forward erasure of the input up to ``T_i``) is rearranged by
    ``reverse_loops``. Schedule times are unchanged.
    """
    verts, steps, g = _unpack(path)
    T = len(verts) - 1
    times = _schedule_times(sched, T)
    if T == 0:
        return path
    out_v, out_s = list(verts), list(steps) if steps is not None else [None] * T
    src_s = out_s[:]
    pieces = [(0, times[1])]
    for Ti, Tn in zip(times[1:-1], times[2:]):
        gv, gs = _fle(verts[: Ti + 1], src_s[:Ti])
        _, ti = _mixed_step(gv, gs, verts, src_s, Ti, Tn)
        pieces.append((ti, Tn))
    for a, b in pieces:
        nv, ns = reverse_loops(verts[a : b + 1], src_s[a:b])
        out_v[a : b + 1] = nv
        out_s[a:b] = ns
    if isinstance(path, WalkPath):
        return WalkPath(g, out_v, out_s, path.terminal)
    if steps is None:
        return out_v
    return out_v, out_s


def inverse_reversal_map(path, sched):
    """Undo ``reversal_map``; the rearranged segments are recovered from the output."""
    verts, steps, g = _unpack(path)
    T = len(verts) - 1
    times = _schedule_times(sched, T)
    if T == 0:
        return path
    src_s = list(steps) if steps is not None else [None] * T
    out_v, out_s = list(verts), src_s[:]
    # the mixed erasure of the output up to T_i is the forward erasure of the input
    yv, ys = _ble(verts[: times[1] + 1], src_s[: times[1]])
    pieces = [(0, times[1])]
    for Ti, Tn in zip(times[1:-1], times[2:]):
        si, ti = _mixed_step(yv, ys, verts, src_s, Ti, Tn)
        pieces.append((ti, Tn))
        bv, bs = _ble(verts[ti : Tn + 1], src_s[ti:Tn])
        yv, ys = yv[:si] + bv, ys[:si] + bs
    for a, b in pieces:
        nv, ns = unreverse_loops(verts[a : b + 1], src_s[a:b])
        out_v[a : b + 1] = nv
        out_s[a:b] = ns
    if isinstance(path, WalkPath):
        return WalkPath(g, out_v, out_s, path.terminal)
    if steps is None:
        return out_v
    return out_v, out_s


# --- exact law of the loop-erased walk ------------------------------------------


def _exact_probs(graph: WiredGraph):
    return [graph.edge_prob_exact(int(e)) for e in graph.edge_ids]


def _escape_h(graph: WiredGraph, blocked: frozenset, q):
    """h(v) = P_v(reach the cemetery before ``blocked``), exact."""
    n = graph.n
    free = [v for v in range(n) if v not in blocked]
    idx = {v: k for k, v in enumerate(free)}
    M = [[Fraction(0)] * len(free) for _ in free]
    b = [Fraction(0)] * len(free)
    for v in free:
        r = idx[v]
        M[r][r] += 1
        for s in range(graph.indptr[v], graph.indptr[v + 1]):
            t = int(graph.targets[s])
            if t == n:
                b[r] += q[s]
            elif t in idx:
                M[r][idx[t]] -= q[s]
    sol = _exact.solve(M, b) if free else []
    h = {v: sol[idx[v]] for v in free}
    h[n] = Fraction(1)
    return h


def laplacian_walk_law(graph: WiredGraph, start: int = 0, max_vertices: int = 12) -> dict:
    """Exact law of the loop erasure of a walk from ``start`` to the cemetery.

    Keys are step tuples (CSR slots), values Fractions. The erased path grows
    from its tip u through slot u->v with probability proportional to
    ``q(u->v) h(v)``, where h is the probability of reaching the cemetery
    before returning to the current path.
    """
    if graph.n > max_vertices:
        raise ValueError(f"exact law limited to {max_vertices} interior vertices (got {graph.n})")
    q = _exact_probs(graph)
    n = graph.n
    cache = {}
    law = {}
    stack = [((start,), (), Fraction(1))]
    while stack:
        verts, steps, p = stack.pop()
        u = verts[-1]
        if u == n:
            law[steps] = law.get(steps, Fraction(0)) + p
            continue
        key = frozenset(verts)
        if key not in cache:
            cache[key] = _escape_h(graph, key, q)
        h = cache[key]
        moves = []
        for s in range(graph.indptr[u], graph.indptr[u + 1]):
            t = int(graph.targets[s])
            if t in h and t not in key:
                w = q[s] * h[t]
                if w:
                    moves.append((s, t, w))
        z = sum(w for _, _, w in moves)
        for s, t, w in moves:
            stack.append((verts + (t,), steps + (s,), p * w / z))
    return law


def lerw_path_probability(graph: WiredGraph, steps, start: int = 0) -> Fraction:
    """P(loop erasure = the given path), by the Green's-function product.

    prod_j q(e_j) * G_{D minus gamma_<j}(gamma_j, gamma_j); independent of the
    growth rule used in ``laplacian_walk_law``.
    """
    q = _exact_probs(graph)
    n = graph.n
    verts = [start]
    for s in steps:
        verts.append(int(graph.targets[s]))
    p = Fraction(1)
    for j, s in enumerate(steps):
        blocked = set(verts[:j])
        free = [v for v in range(n) if v not in blocked]
        idx = {v: k for k, v in enumerate(free)}
        M = [[Fraction(int(a == b)) for b in range(len(free))] for a in range(len(free))]
        for v in free:
            for k in range(graph.indptr[v], graph.indptr[v + 1]):
                t = int(graph.targets[k])
                if t in idx:
                    M[idx[v]][idx[t]] -= q[k]
        e = [Fraction(0)] * len(free)
        e[idx[verts[j]]] = Fraction(1)
        green = _exact.solve(M, e)[idx[verts[j]]]
        p *= q[s] * green
    return p


# --- quasiloops -------------------------------------------------------------------


@dataclass(frozen=True)
class QuasiloopHit:
    a: int
    b: int
    closing: float
    diameter: float


def scan_quasiloops(points, r: float, R: float) -> list:
    """Maximal index pairs with |x_a - x_b| <= r and diam(x[a..b]) >= R.

    ``points`` is a point array, or anything with a ``points()`` method.
    A pair contained in another reported pair is suppressed.
    """
    if not r < R:
        raise ValueError("need r < R")
    P = np.asarray(points.points() if hasattr(points, "points") else points, float).reshape(-1, 2)
    n = len(P)
    cands = []
    for a in range(n):
        d = np.hypot(*(P[a + 1 :] - P[a]).T)
        close = np.flatnonzero(d <= r)
        if len(close) == 0:
            continue
        b = a + 1 + int(close[-1])
        seg = P[a : b + 1]
        reach = float(np.hypot(*(seg - P[a]).T).max())
        if 2 * reach < R:
            continue
        diam = reach if reach >= R else diameter(seg)
        if diam >= R:
            cands.append(QuasiloopHit(a, b, float(d[close[-1]]), float(diameter(seg))))
    hits = []
    best_b = -1
    for h in cands:
        if h.b > best_b:
            hits.append(h)
            best_b = h.b
    return hits
