"""Random walks on wired graphs.

Unconditioned walks run in compiled kernels. Conditioned walks are sampled
either by a staged Doob transform (exact, one harmonic solve per stage) or
by plain rejection. The estimators at the bottom measure the crossing,
Beurling and harmonic-measure quantities that the coupling relies on.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import _kernels
from .geometry import densify, winding_around
from .lattice import WiredGraph
from .rng import kernel_seed, make_rng

DEFAULT_STEP_CAP = 50_000_000
EXACT_LIMIT = 20_000
DEFAULT_MAX_TRIES = 1_000_000

HIT_SET = "hit-set"
EXITED = "exited-domain"
STEP_CAP = "step-cap"


class ZeroProbabilityError(ValueError):
    """The conditioning event has probability zero from the start vertex."""


class ConditioningFailure(RuntimeError):
    def __init__(self, attempts: int, message: str = ""):
        super().__init__(message or f"conditioning event not observed in {attempts} attempts")
        self.attempts = attempts


# --- paths -------------------------------------------------------------------


@dataclass(eq=False)
class WalkPath:
    """A finite trajectory: ``vertices[k+1]`` is the head of slot ``slots[k]``.

    The last vertex may be the cemetery ``graph.n``.
    """

    graph: WiredGraph
    vertices: np.ndarray
    slots: np.ndarray
    terminal: str

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.int64)
        self.slots = np.asarray(self.slots, dtype=np.int64)
        if len(self.vertices) != len(self.slots) + 1:
            raise ValueError("a path has one more vertex than steps")

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def edges(self) -> np.ndarray:
        return self.graph.edge_ids[self.slots]

    @property
    def start(self) -> int:
        return int(self.vertices[0])

    @property
    def end(self) -> int:
        return int(self.vertices[-1])

    @property
    def exited(self) -> bool:
        return self.end == self.graph.n

    @property
    def exit_edge(self) -> Optional[int]:
        return int(self.edges[-1]) if self.exited and len(self) else None

    def sub(self, s: int, t: int) -> "WalkPath":
        """The piece between step indices ``s <= t`` (vertex indices)."""
        term = self.terminal if t == len(self) else HIT_SET
        return WalkPath(self.graph, self.vertices[s : t + 1], self.slots[s:t], term)

    def points(self) -> np.ndarray:
        """Vertex positions; a final cemetery visit maps to the exit point."""
        g = self.graph
        pts = np.empty((len(self.vertices), 2))
        interior = self.vertices < g.n
        pts[interior] = g.positions[self.vertices[interior]]
        for k in np.flatnonzero(~interior):
            pts[k] = g.boundary_edge(int(self.edges[k - 1])).point
        return pts

    def geometry(self) -> np.ndarray:
        """The continuous curve obtained by concatenating the edges."""
        g = self.graph
        if len(self) == 0:
            return g.position(self.start)[None, :].copy()
        parts = [g.edge_geometry(int(self.edges[0]))]
        for e in self.edges[1:]:
            parts.append(g.edge_geometry(int(e))[1:])
        return np.vstack(parts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("step,edge,x,y\n")
        pts = self.points()
        buf.write(f"0,-1,{float(pts[0, 0])!r},{float(pts[0, 1])!r}\n")
        for k, e in enumerate(self.edges, start=1):
            buf.write(f"{k},{int(e)},{float(pts[k, 0])!r},{float(pts[k, 1])!r}\n")
        return buf.getvalue()

    def to_svg(self, **kw) -> str:
        from .render import svg_document

        return svg_document([self.geometry()], **kw)


def _stop_mask(graph: WiredGraph, stop) -> np.ndarray:
    mask = np.zeros(graph.n + 1, dtype=np.bool_)
    if stop is None:
        return mask
    arr = np.asarray(stop)
    if arr.dtype == bool:
        mask[: len(arr)] = arr
    else:
        mask[arr.astype(np.int64)] = True
    return mask


def run_walk(
    graph: WiredGraph,
    start: int,
    stop=None,
    rng=None,
    step_cap: int = DEFAULT_STEP_CAP,
) -> WalkPath:
    """Walk from ``start`` until ``stop`` fires or the cemetery is reached.

    ``stop`` is None, a vertex set (ids or boolean mask), or a callable
    ``stop(v, vertices_so_far) -> bool`` evaluated after every step.
    """
    if not 0 <= start < graph.n:
        raise ValueError(f"start {start} is not an interior vertex")
    if step_cap <= 0:
        raise ValueError("step_cap must be positive")
    rng = make_rng(rng)
    if callable(stop):
        return _run_walk_py(graph, start, stop, rng, step_cap)
    mask = _stop_mask(graph, stop)
    verts, slots, flag = _kernels.walk(graph.indptr, graph.targets, graph.cum, start, mask, step_cap, kernel_seed(rng))
    if flag:
        term = STEP_CAP
    else:
        term = EXITED if verts[-1] == graph.n else HIT_SET
    return WalkPath(graph, verts, slots, term)


def _run_walk_py(graph, start, stop, rng, step_cap):
    verts, slots = [start], []
    v = start
    n = graph.n
    while len(slots) < step_cap:
        a, b = graph.indptr[v], graph.indptr[v + 1]
        s = a + int(np.searchsorted(graph.cum[a:b], rng.random()))
        s = min(s, b - 1)
        v = int(graph.targets[s])
        slots.append(s)
        verts.append(v)
        if v == n:
            return WalkPath(graph, verts, slots, EXITED)
        if stop(v, verts):
            return WalkPath(graph, verts, slots, HIT_SET)
    return WalkPath(graph, verts, slots, STEP_CAP)


# --- stopping schedules --------------------------------------------------------


@dataclass
class StoppingSchedule:
    """Alternating hitting times ``T_0 = 0 < T_1 < ...`` of a path.

    ``times`` ends with the final index of the path. ``i_max`` is the last
    ``i`` with ``T_i`` strictly before the end, so ``times`` has
    ``i_max + 2`` entries.
    """

    times: list
    sets: tuple
    i_max: int

    @property
    def t_max(self) -> int:
        return self.times[-1]


def schedule(path: WalkPath, sets) -> StoppingSchedule:
    """``T_{i+1}`` = first index after ``T_i`` in ``E_{i+1}``, or the end.

    ``E_1, E_3, ...`` is ``sets[0]`` and ``E_2, E_4, ...`` is ``sets[1]``.
    """
    n = path.graph.n
    masks = [_stop_mask(path.graph, s) for s in sets]
    for m in masks:
        m[n] = False
    verts = path.vertices
    end = len(verts) - 1
    times = [0]
    while times[-1] < end:
        m = masks[len(times) % 2 == 0]
        hits = np.flatnonzero(m[verts[times[-1] + 1 :]])
        times.append(int(times[-1] + 1 + hits[0]) if len(hits) else end)
    if end == 0:
        times.append(0)
    return StoppingSchedule(times, tuple(sets), len(times) - 2)


# --- crossing rectangles -------------------------------------------------------


@dataclass(frozen=True)
class CrossingRect:
    """Rectangle of width ``w = |b - a| / 2`` and length ``3w`` around the chord.

    ``a`` and ``b`` are the centres of the starting and target balls, both of
    radius ``w / 4``; the chord sits at distance ``w/2`` from either end.
    ``ball`` overrides that radius, e.g. to keep a lattice vertex inside the
    target ball of a thin rectangle.
    """

    a: tuple
    b: tuple
    ball: Optional[float] = None

    @classmethod
    def placed(cls, z, eps: float, orientation: str = "h") -> "CrossingRect":
        """The standard ``z + eps*[0,3]x[0,1]`` (or its vertical twin)."""
        z = np.asarray(z, float)
        a = z + eps * np.array([0.5, 0.5])
        if orientation == "h":
            b = z + eps * np.array([2.5, 0.5])
        elif orientation == "v":
            b = z + eps * np.array([0.5, 2.5])
        else:
            raise ValueError("orientation is 'h' or 'v'")
        return cls(tuple(a), tuple(b))

    @property
    def width(self) -> float:
        return float(np.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1])) / 2

    def _frame(self, pts):
        a = np.asarray(self.a)
        d = np.asarray(self.b) - a
        u = d / np.linalg.norm(d)
        nrm = np.array([-u[1], u[0]])
        rel = np.asarray(pts, float).reshape(-1, 2) - a
        return rel @ u, rel @ nrm

    def contains(self, pts) -> np.ndarray:
        w = self.width
        s, t = self._frame(pts)
        return (s > -w / 2) & (s < 2.5 * w) & (np.abs(t) < w / 2)

    @property
    def radius(self) -> float:
        return self.width / 4 if self.ball is None else self.ball

    def in_start(self, pts) -> np.ndarray:
        return np.hypot(*(np.asarray(pts, float).reshape(-1, 2) - self.a).T) < self.radius

    def in_target(self, pts) -> np.ndarray:
        return np.hypot(*(np.asarray(pts, float).reshape(-1, 2) - self.b).T) < self.radius

    def polygon(self) -> np.ndarray:
        a = np.asarray(self.a)
        d = np.asarray(self.b) - a
        u = d / np.linalg.norm(d)
        nrm = np.array([-u[1], u[0]])
        w = self.width
        return np.array([a + s * u + t * nrm for s, t in [(-w / 2, -w / 2), (2.5 * w, -w / 2), (2.5 * w, w / 2), (-w / 2, w / 2)]])


def rectangles_following(curve, step: float, min_step: Optional[float] = None, ball: Optional[float] = None) -> list:
    """Chain of crossing rectangles along a curve, built greedily.

    Successive chord endpoints are the first exits of balls of radius
    ``step`` around the previous endpoint; the chain ends at the curve's end
    point. A final chord shorter than ``min_step`` (default ``step/2``) is
    merged into its predecessor.
    """
    pts = densify(np.asarray(curve, float), step / 16)
    if min_step is None:
        min_step = step / 2
    anchors = [pts[0]]
    for p in pts[1:]:
        if np.hypot(*(p - anchors[-1])) >= step:
            anchors.append(p)
    end = pts[-1]
    if np.hypot(*(end - anchors[-1])) < min_step and len(anchors) > 1:
        anchors[-1] = end
    elif np.hypot(*(end - anchors[-1])) > 0:
        anchors.append(end)
    return [CrossingRect(tuple(map(float, p)), tuple(map(float, q)), ball) for p, q in zip(anchors[:-1], anchors[1:])]


# --- conditioning ----------------------------------------------------------------


@dataclass(eq=False)
class Condition:
    """An event on walks stopped at an absorbing set.

    The walk runs until it enters ``absorbing`` (the cemetery is always
    absorbing). It succeeds when the last step is a ``success`` slot and,
    before that, it crossed each rectangle in order: while working on
    rectangle ``k`` it must stay inside it until it enters its target ball.
    After the last rectangle it must stay in ``confine`` (interior mask, all
    vertices when None) until absorbed.
    """

    absorbing: np.ndarray  # bool, length n+1
    success: np.ndarray  # bool per slot; read only where the target is absorbing
    rects: tuple = ()
    label: str = ""
    confine: Optional[np.ndarray] = None

    def crossing(self, rects) -> "Condition":
        return replace(self, rects=tuple(rects), label=self.label + f" & cross {len(rects)} rectangles")

    def stages(self, graph: WiredGraph):
        """Per rectangle: (region mask, goal mask) over interior vertices."""
        pos = graph.positions
        out = []
        for r in self.rects:
            region = r.contains(pos)
            goal = r.in_target(pos) & region
            if not goal.any():
                raise ZeroProbabilityError(f"target ball of {r} holds no vertex")
            out.append((region, goal))
        return out

    def holds(self, path: WalkPath) -> bool:
        g = path.graph
        if path.terminal == STEP_CAP or not self.absorbing[path.end]:
            return False
        stages = self.stages(g)
        k = 0
        for t in path.vertices[1:-1]:
            if k == len(stages):
                if self.confine is not None and not self.confine[t]:
                    return False
                continue
            region, goal = stages[k]
            if goal[t]:
                k += 1
            elif not region[t]:
                return False
        if len(path) == 0:
            return False
        return k == len(stages) and bool(self.success[path.slots[-1]])


def exit_through(graph: WiredGraph, edges, stop=None) -> Condition:
    """Leave the domain through one of the given (global) boundary edges."""
    edges = np.atleast_1d(np.asarray(edges, dtype=np.int64))
    for e in edges:
        if not graph.boundary_flag[e]:
            raise ValueError(f"edge {e} is not a boundary edge")
    absorbing = _stop_mask(graph, stop)
    absorbing[graph.n] = True
    success = np.isin(graph.edge_ids, edges) & (graph.targets == graph.n)
    return Condition(absorbing, success, label=f"exit through {edges.tolist()}")


def hit_before(graph: WiredGraph, A, B) -> Condition:
    """Hit ``A`` before ``B`` and before leaving the domain."""
    a = _stop_mask(graph, A)
    b = _stop_mask(graph, B)
    a[graph.n] = False
    absorbing = a | b
    absorbing[graph.n] = True
    return Condition(absorbing, a[graph.targets], label="hit A before B")


def hit_at(graph: WiredGraph, target: int, absorbing) -> Condition:
    """Enter the absorbing set for the first time exactly at ``target``."""
    m = _stop_mask(graph, absorbing)
    m[target] = True
    m[graph.n] = True
    return Condition(m, graph.targets == target, label=f"first hit at {target}")


def absorbed(graph: WiredGraph, stop=None) -> Condition:
    """Trivial final event: any absorption counts (useful with rectangles)."""
    m = _stop_mask(graph, stop)
    m[graph.n] = True
    return Condition(m, np.ones(len(graph.targets), dtype=bool), label="absorbed")


def _harmonic_solve(graph: WiredGraph, W: np.ndarray, outside_value: np.ndarray) -> np.ndarray:
    """Solve h = Q h on W with h(target) given per slot for targets off W.

    Returns a length-(n+1) array, zero off W.
    """
    n = graph.n
    Wx = np.append(W, False)
    idx = np.flatnonzero(W)
    h = np.zeros(n + 1)
    if len(idx) == 0:
        return h
    loc = np.full(n + 1, -1, dtype=np.int64)
    loc[idx] = np.arange(len(idx))
    rows_in = W[graph.rows]
    tin = Wx[graph.targets]
    m = rows_in & tin
    A = sp.identity(len(idx), format="csr") - sp.csr_matrix(
        (graph.probs[m], (loc[graph.rows[m]], loc[graph.targets[m]])), shape=(len(idx), len(idx))
    )
    mb = rows_in & ~tin
    rhs = np.bincount(loc[graph.rows[mb]], weights=graph.probs[mb] * outside_value[mb], minlength=len(idx))
    if not rhs.any():
        return h
    h[idx] = spla.spsolve(A.tocsc(), rhs)
    return h


class HTransform:
    """Stage-by-stage harmonic weights for a Condition on a graph.

    ``value[k][s]`` is the probability of the event after taking slot ``s``
    while working on stage ``k`` (stage ``len(rects)`` is the final one).
    Stage conditions are checked on the vertices entered after the stage
    starts, matching ``Condition.holds``.
    """

    def __init__(self, graph: WiredGraph, cond: Condition):
        self.graph = graph
        self.cond = cond
        self._packed = None
        n = graph.n
        tgt = graph.targets
        t_abs = cond.absorbing[tgt]
        stages = cond.stages(graph)
        K = len(stages)
        self.goals = [goal for _, goal in stages]
        self.value = [None] * (K + 1)
        val = np.where(t_abs, cond.success.astype(float), 0.0)
        free = ~cond.absorbing[:n]
        if cond.confine is not None:
            free &= cond.confine
        h = _harmonic_solve(graph, free, val)
        self.value[K] = np.where(t_abs, val, np.append(h[:n] * free, 0.0)[tgt])
        for k in range(K - 1, -1, -1):
            region, goal = stages[k]
            goal_x = np.append(goal, False)
            # entering the goal starts stage k+1 at the entered vertex
            start_next = np.append(self._row_values(k + 1), 0.0)
            entry = np.where(goal_x[tgt] & ~t_abs, start_next[tgt], 0.0)
            W = region & ~goal & ~cond.absorbing[:n]
            hk = _harmonic_solve(graph, W, entry)
            Wx = np.append(W, False)
            self.value[k] = np.where(goal_x[tgt], entry, np.where(Wx[tgt] & ~t_abs, hk[tgt], 0.0))

    def _row_values(self, k: int) -> np.ndarray:
        g = self.graph
        return np.add.reduceat(g.probs * self.value[k], g.indptr[:-1])

    def probability(self, start: int) -> float:
        g = self.graph
        a, b = g.indptr[start], g.indptr[start + 1]
        return float(g.probs[a:b] @ self.value[0][a:b])

    def sample(self, start: int, rng, step_cap: int = DEFAULT_STEP_CAP) -> WalkPath:
        g = self.graph
        p0 = self.probability(start)
        if not p0 > 0:
            raise ZeroProbabilityError(f"conditioning event has probability 0 from vertex {start}")
        if self._packed is None:
            K = len(self.goals)
            goals = np.zeros((max(K, 1), g.n + 1), dtype=np.bool_)
            for k, gl in enumerate(self.goals):
                goals[k, : g.n] = gl
            self._packed = (np.vstack(self.value), goals, K)
        value, goals, K = self._packed
        verts, slots, flag = _kernels.htransform_walk(
            g.indptr, g.targets, g.probs, value, goals, K, self.cond.absorbing, start, step_cap, kernel_seed(rng)
        )
        if flag:
            return WalkPath(g, verts, slots, STEP_CAP)
        return WalkPath(g, verts, slots, EXITED if verts[-1] == g.n else HIT_SET)


def conditioned_walk(
    graph: WiredGraph,
    start: int,
    condition: Condition,
    method: str = "auto",
    rng=None,
    max_tries: int = DEFAULT_MAX_TRIES,
    step_cap: int = DEFAULT_STEP_CAP,
    htransform: Optional[HTransform] = None,
) -> WalkPath:
    """Sample a walk from ``start`` conditioned on ``condition``.

    ``method`` is ``"exact"`` (Doob transform), ``"rejection"`` or
    ``"auto"`` (exact up to EXACT_LIMIT interior vertices). A precomputed
    HTransform can be passed to amortise the solves over many samples.
    """
    rng = make_rng(rng)
    if method == "auto":
        method = "exact" if graph.n <= EXACT_LIMIT or htransform is not None else "rejection"
    if method == "exact":
        ht = htransform or HTransform(graph, condition)
        return ht.sample(start, rng, step_cap)
    if method != "rejection":
        raise ValueError(f"unknown method {method!r}")
    for _ in range(max_tries):
        path = run_walk(graph, start, condition.absorbing, rng, step_cap)
        if condition.holds(path):
            return path
    raise ConditioningFailure(max_tries)


# --- estimators --------------------------------------------------------------------


@dataclass
class EstimateReport:
    estimate: float
    stderr: float
    n_samples: int
    parameters: dict = field(default_factory=dict)
    fitted_exponent: Optional[float] = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "parameters": self.parameters,
            "fitted_exponent": self.fitted_exponent,
        }


def _bernoulli_report(hits: int, n: int, params: dict) -> EstimateReport:
    p = hits / n
    params = dict(params)
    if n < 30:
        params["low_n"] = True
    se = math.sqrt(p * (1 - p) / n) if n > 1 else float("inf")
    return EstimateReport(p, se, n, params)


def _batched(fn, n: int, rng, threads: int = 1, chunk: int = 200_000):
    """Run ``fn(m, seed) -> count`` over chunks; counts merge by addition."""
    sizes = [min(chunk, n - i) for i in range(0, n, chunk)]
    seeds = [kernel_seed(rng) for _ in sizes]
    if threads <= 1 or len(sizes) == 1:
        return sum(fn(m, s) for m, s in zip(sizes, seeds))
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(threads) as ex:
        return sum(ex.map(fn, sizes, seeds))


def estimate_crossing(graph: WiredGraph, z, eps: float, orientation: str = "h", n: int = 10_000, rng=None, threads: int = 1) -> EstimateReport:
    """Frequency of reaching the target ball before leaving the rectangle."""
    rng = make_rng(rng)
    rect = CrossingRect.placed(z, eps, orientation)
    pos = graph.positions
    starts = np.flatnonzero(rect.in_start(pos))
    if len(starts) == 0:
        raise ValueError("no vertex in the starting ball")
    mesh = graph.graph.mesh
    if eps / mesh < 8:
        warnings.warn(f"mesh {mesh} is coarse relative to eps={eps}", stacklevel=2)
    target = np.append(rect.in_target(pos), False)
    stop = np.append(~rect.contains(pos), True) | target

    def run(m, seed):
        st = starts[np.random.default_rng(seed).integers(len(starts), size=m)]
        last, _ = _kernels.hit_batch(graph.indptr, graph.targets, graph.cum, st, stop, DEFAULT_STEP_CAP, seed)
        return int(np.count_nonzero(target[last.clip(0)] & (last >= 0)))

    hits = _batched(run, n, rng, threads)
    return _bernoulli_report(hits, n, {"z": list(map(float, z)), "eps": eps, "orientation": orientation, "mesh": mesh})


def _segments_cross(graph: WiredGraph, curve: np.ndarray) -> np.ndarray:
    """Per slot: does the (truncated) edge polyline meet the curve?"""
    from .geometry import segment_intersections

    segs = list(zip(curve[:-1], curve[1:]))
    lo = curve.min(axis=0)
    hi = curve.max(axis=0)
    out = np.zeros(len(graph.targets), dtype=np.bool_)
    for k, e in enumerate(graph.edge_ids):
        pl = graph.edge_geometry(int(e))
        if np.any(pl.max(axis=0) < lo - 1e-12) or np.any(pl.min(axis=0) > hi + 1e-12):
            continue
        hit = False
        for p, q in zip(pl[:-1], pl[1:]):
            for a, b in segs:
                if segment_intersections(p, q, a, b, 1e-12):
                    hit = True
                    break
            if hit:
                break
        out[k] = hit
    return out


def _obstacle_ok(curve, center, r, R) -> bool:
    d = np.hypot(*(densify(curve, r / 8) - center).T)
    if len(d) == 0 or d.min() > r * (1 + 1e-9):
        return False
    if d.max() >= R * (1 - 1e-9):
        return True
    closed = np.allclose(curve[0], curve[-1])
    if closed:
        try:
            return abs(winding_around(curve, center)) > math.pi
        except ValueError:
            return False
    return False


def estimate_beurling(
    graph: WiredGraph,
    center: int,
    r,
    R: float,
    obstacle,
    n: int = 10_000,
    rng=None,
    threads: int = 1,
) -> EstimateReport:
    """Probability of leaving B(v, R) before touching the obstacle curve.

    ``obstacle`` is a polyline connecting the two circles, or a callable
    ``obstacle(r, R)`` returning one. When ``r`` is a sequence, each ratio
    is estimated and ``fitted_exponent`` is the least-squares slope of
    log(estimate) against log(r/R).
    """
    rng = make_rng(rng)
    if np.ndim(r):
        reps = [estimate_beurling(graph, center, ri, R, obstacle, n, rng, threads) for ri in r]
        x = np.log(np.asarray(r, float) / R)
        y = np.array([math.log(rep.estimate) if rep.estimate > 0 else np.nan for rep in reps])
        ok = np.isfinite(y)
        alpha = float(np.polyfit(x[ok], y[ok], 1)[0]) if ok.sum() >= 2 else None
        last = reps[-1]
        params = dict(last.parameters, ladder=[rep.to_dict() for rep in reps])
        return EstimateReport(last.estimate, last.stderr, last.n_samples, params, alpha)
    if not R >= 2 * r:
        raise ValueError("need R >= 2r")
    c = graph.position(center)
    curve = np.asarray(obstacle(r, R) if callable(obstacle) else obstacle, float)
    if curve.ndim != 2 or len(curve) < 2 or not _obstacle_ok(curve, c, r, R):
        raise ValueError("obstacle does not connect the circles of radii r and R")
    pos = graph.positions
    outside = np.append(np.hypot(*(pos - c).T) >= R, True)
    touch = _segments_cross(graph, curve)

    def run(m, seed):
        st = np.full(m, center, dtype=np.int64)
        last, ls = _kernels.hit_batch_slots(graph.indptr, graph.targets, graph.cum, st, outside, touch, DEFAULT_STEP_CAP, seed)
        ok = (last >= 0) & ~touch[ls]
        return int(np.count_nonzero(ok))

    hits = _batched(run, n, rng, threads)
    return _bernoulli_report(hits, n, {"center": int(center), "r": float(r), "R": float(R)})


def estimate_harmonic_measure(
    graph: WiredGraph,
    start: int,
    w,
    r: float,
    R: float,
    n: int = 10_000,
    rng=None,
    threads: int = 1,
) -> EstimateReport:
    """Frequency of exiting through boundary edges crossing inside B(w, r)."""
    rng = make_rng(rng)
    if not r < R:
        raise ValueError("need r < R")
    w = np.asarray(w, float)
    if np.hypot(*(graph.position(start) - w)) <= R:
        raise ValueError("start must lie at distance > R from w")
    near = np.zeros(len(graph.targets), dtype=bool)
    for b in graph.boundary:
        if np.hypot(b.point[0] - w[0], b.point[1] - w[1]) < r:
            near[graph.edge_slot[b.edge]] = True
    stop = np.zeros(graph.n + 1, dtype=np.bool_)

    def run(m, seed):
        st = np.full(m, start, dtype=np.int64)
        last, ls = _kernels.hit_batch(graph.indptr, graph.targets, graph.cum, st, stop, DEFAULT_STEP_CAP, seed)
        return int(np.count_nonzero((last == graph.n) & near[ls]))

    hits = _batched(run, n, rng, threads)
    return _bernoulli_report(hits, n, {"start": int(start), "w": w.tolist(), "r": r, "R": R})


def exit_distribution(graph: WiredGraph, start: int) -> np.ndarray:
    """Exact exit law from ``start``: probability per boundary slot."""
    n = graph.n
    e = np.zeros(n + 1)
    e[start] = 1.0
    Q = graph.sparse_substochastic()
    green = spla.spsolve((sp.identity(n, format="csc") - Q.T.tocsc()), e[:n])
    out = np.where(graph.targets == n, graph.probs * green[graph.rows], 0.0)
    return out
