"""Couplings of spanning-tree branches in two nested domains.

Two constructions live here.

*Upper coupling.* A branch from a point next to the inner boundary is
installed in the outer domain, conditioned to run once around the inner
boundary and then leave. Wilson's algorithm is then run in both domains
from the same random-walk trajectories; each domain stops a trajectory at
its own stopping time.

*Lower coupling.* A loop-erased walk Y2 in the outer domain is dressed with
small loops and rearranged so that its mixed loop erasure (with respect to
alternating visits to U2 and the complement of U3) is Y2 again. A walk in
the inner domain copies the pieces inside U3 and follows the images of the
pieces outside U3 through chains of crossing rectangles, conditioned on
re-entering U2 at the same vertex. Its mixed loop erasure then agrees with
Y2 near U.

Both domains must be discretised on the same lattice so that vertices are
shared; :class:`CouplingSetup` takes care of that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .erasure import SimplePath, forward_le, mixed_le, reversal_map, scan_quasiloops
from .geometry import Disc, Polygon, Shape, densify, discrete_frechet, frechet_prefixes, point_to_polyline_distance, shape_from_dict
from .lattice import DomainSpec, WiredGraph, discretize, lattice_for
from .loopsoup import attach_small_loops, loops_along
from .rng import kernel_seed, make_rng, map_tasks as _map_runs, task_rng
from .ust import PartialTree
from .walk import (
    Condition,
    absorbed,
    ConditioningFailure,
    HTransform,
    EXITED,
    HIT_SET,
    WalkPath,
    ZeroProbabilityError,
    hit_at,
    rectangles_following,
    run_walk,
    schedule,
)

# --- configuration -----------------------------------------------------------------


def _boundary_samples(shape: Shape, step: float) -> np.ndarray:
    return densify(shape.boundary_polyline(512), step)


def _inside(inner: Shape, outer: Shape, step: float) -> tuple:
    """(all of inner's boundary inside outer, smallest gap between the boundaries)."""
    pts = _boundary_samples(inner, step)
    ok = all(outer.contains(p) for p in pts)
    gap = float(point_to_polyline_distance(pts, _boundary_samples(outer, step)).min())
    return ok, gap


@dataclass
class CouplingConfig:
    D1: DomainSpec
    D2: DomainSpec
    U: Shape
    U1: Shape
    U2: Shape
    U3: Shape
    mesh: float
    r: float = 0.05
    eps: float = 0.2
    k: int = 1
    max_tries: int = 10_000
    rect_halfwidth: Optional[float] = None  # tube half-width of the following rectangles; default r
    branch_method: str = "tube"
    soup_cap: Optional[float] = None  # loop diameter cap; default r

    def __post_init__(self):
        self.validate()

    @property
    def tube(self) -> float:
        return self.r if self.rect_halfwidth is None else self.rect_halfwidth

    @property
    def cap(self) -> float:
        return self.r if self.soup_cap is None else self.soup_cap

    def validate(self):
        if not (self.mesh > 0 and self.r > 0 and 0 < self.eps < 1):
            raise ValueError("mesh, r must be positive and eps in (0, 1)")
        if self.branch_method not in ("tube", "rejection"):
            raise ValueError(f"unknown branch method {self.branch_method!r}")
        step = self.mesh / 4
        chain = [("U", self.U), ("U1", self.U1), ("U2", self.U2), ("U3", self.U3), ("D1", self.D1.shape)]
        for (na, a), (nb, b) in zip(chain[:-1], chain[1:]):
            ok, gap = _inside(a, b, step)
            if not ok:
                raise ValueError(f"{na} is not inside {nb}")
            if gap <= self.r:
                raise ValueError(f"gap between {na} and {nb} ({gap:.4g}) must exceed r = {self.r}")
        if self.D1.shape is not self.D2.shape and self.D1.shape.to_dict() != self.D2.shape.to_dict():
            ok, gap = _inside(self.D1.shape, self.D2.shape, step)
            if not ok:
                raise ValueError("D1 is not inside D2")
            if gap <= self.r:
                raise ValueError(f"gap between D1 and D2 ({gap:.4g}) must exceed r = {self.r}")

    @property
    def identical(self) -> bool:
        return self.D1.to_dict() == self.D2.to_dict()

    def to_dict(self) -> dict:
        return {
            "D1": self.D1.to_dict(),
            "D2": self.D2.to_dict(),
            "U": self.U.to_dict(),
            "U1": self.U1.to_dict(),
            "U2": self.U2.to_dict(),
            "U3": self.U3.to_dict(),
            "mesh": self.mesh,
            "r": self.r,
            "eps": self.eps,
            "k": self.k,
            "max_tries": self.max_tries,
            "rect_halfwidth": self.rect_halfwidth,
            "branch_method": self.branch_method,
            "soup_cap": self.soup_cap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CouplingConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown coupling keys {sorted(unknown)}")
        kw = dict(d)
        for key in ("D1", "D2"):
            kw[key] = DomainSpec.from_dict(d[key])
        for key in ("U", "U1", "U2", "U3"):
            kw[key] = shape_from_dict(d[key])
        return cls(**kw)


def concentric_discs(R1: float = 1.0, R2: float = 1.5, u: float = 0.3, mesh: float = 1 / 32, **kw) -> CouplingConfig:
    """Discs around the origin: U, U1, U2, U3 at radii u, then evenly spaced up to R1."""
    gap = (R1 - u) / 4
    marked1 = (R1, 0.0)
    marked2 = (R2, 0.0)
    return CouplingConfig(
        D1=DomainSpec(Disc((0.0, 0.0), R1), marked=marked1),
        D2=DomainSpec(Disc((0.0, 0.0), R2), marked=marked2),
        U=Disc((0.0, 0.0), u),
        U1=Disc((0.0, 0.0), u + gap),
        U2=Disc((0.0, 0.0), u + 2 * gap),
        U3=Disc((0.0, 0.0), u + 3 * gap),
        mesh=mesh,
        **kw,
    )


# --- the map phi -------------------------------------------------------------------


@dataclass(frozen=True)
class DomainMap:
    """Identity on U3, interpolating outwards so that D2 lands on D1.

    ``radial``: concentric discs, radius rho..R_from mapped linearly onto
    rho..R_to, with an optional twist of ``twist`` full turns accumulated
    across the annulus. ``axis``: centred rectangles, per-axis piecewise
    linear interpolation between the U3 box and the outer boxes.
    """

    kind: str = "identity"
    center: tuple = (0.0, 0.0)
    rho: float = 0.0
    R_from: float = 1.0
    R_to: float = 1.0
    twist: int = 0
    box3: tuple = ()
    box_from: tuple = ()
    box_to: tuple = ()

    @classmethod
    def for_config(cls, cfg: CouplingConfig, twist: int = 0) -> "DomainMap":
        s1, s2, s3 = cfg.D1.shape, cfg.D2.shape, cfg.U3
        if all(isinstance(s, Disc) for s in (s1, s2, s3)) and s1.center == s2.center == s3.center:
            if s1.radius == s2.radius and twist == 0:
                return cls()
            return cls("radial", tuple(s1.center), s3.radius, s2.radius, s1.radius, twist)
        if cfg.identical and twist == 0:
            return cls()
        if all(isinstance(s, Polygon) and len(s.vertices) == 4 for s in (s1, s2, s3)) and twist == 0:
            return cls("axis", box3=tuple(s3.bbox()), box_from=tuple(s2.bbox()), box_to=tuple(s1.bbox()))
        raise ValueError("no built-in map for this domain pair")

    @staticmethod
    def _interp1(x, inner_lo, inner_hi, from_lo, from_hi, to_lo, to_hi):
        y = np.array(x, float)
        hi = x > inner_hi
        lo = x < inner_lo
        y[hi] = inner_hi + (x[hi] - inner_hi) * (to_hi - inner_hi) / (from_hi - inner_hi)
        y[lo] = inner_lo - (inner_lo - x[lo]) * (inner_lo - to_lo) / (inner_lo - from_lo)
        return y

    def _apply(self, pts, inverse: bool):
        P = np.asarray(pts, float).reshape(-1, 2)
        if self.kind == "identity":
            return P.copy()
        if self.kind == "radial":
            c = np.asarray(self.center)
            d = P - c
            rad = np.hypot(d[:, 0], d[:, 1])
            th = np.arctan2(d[:, 1], d[:, 0])
            out = P.copy()
            m = rad > self.rho
            a, b = (self.R_to, self.R_from) if inverse else (self.R_from, self.R_to)
            new_r = self.rho + (rad[m] - self.rho) * (b - self.rho) / (a - self.rho)
            frac = (new_r - self.rho) / (b - self.rho) if inverse else (rad[m] - self.rho) / (a - self.rho)
            sign = -1.0 if inverse else 1.0
            new_t = th[m] + sign * 2 * math.pi * self.twist * frac
            out[m] = c + np.column_stack([new_r * np.cos(new_t), new_r * np.sin(new_t)])
            return out
        if self.kind == "axis":
            x3lo, y3lo, x3hi, y3hi = self.box3
            f, t = (self.box_to, self.box_from) if inverse else (self.box_from, self.box_to)
            x = self._interp1(P[:, 0], x3lo, x3hi, f[0], f[2], t[0], t[2])
            y = self._interp1(P[:, 1], y3lo, y3hi, f[1], f[3], t[1], t[3])
            return np.column_stack([x, y])
        raise ValueError(f"unknown map kind {self.kind!r}")

    def __call__(self, pts) -> np.ndarray:
        return self._apply(pts, False)

    def inverse(self, pts) -> np.ndarray:
        return self._apply(pts, True)

    def roundtrip_error(self, pts) -> float:
        P = np.asarray(pts, float).reshape(-1, 2)
        return float(np.abs(self.inverse(self(P)) - P).max()) if len(P) else 0.0


# --- shared discretisation ----------------------------------------------------------


class CouplingSetup:
    """Both domains on one lattice, with vertex maps and region masks."""

    def __init__(self, cfg: CouplingConfig):
        self.cfg = cfg
        self.lattice = lattice_for(cfg.D2, cfg.mesh)
        self.g2 = discretize(self.lattice, cfg.D2)
        self.g1 = discretize(self.lattice, cfg.D1) if not cfg.identical else self.g2
        self.phi = DomainMap.for_config(cfg) if not cfg.identical else DomainMap()
        lat = self.lattice
        # ambient CSR for shared trajectories
        order = np.argsort(lat.tails, kind="stable")
        counts = np.bincount(lat.tails, minlength=lat.n_vertices)
        self.amb_indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.amb_edges = order.astype(np.int64)
        w = lat.weights[order]
        cum = np.empty(len(w))
        for v in range(lat.n_vertices):
            a, b = self.amb_indptr[v], self.amb_indptr[v + 1]
            if b > a:
                c = np.cumsum(w[a:b]) / w[a:b].sum()
                c[-1] = 1.0
                cum[a:b] = c
        self.amb_cum = cum
        self.heads = lat.heads.astype(np.int64)
        self._masks = {}
        self._ht = {}

    def mask(self, which: int, shape: Shape) -> np.ndarray:
        """Interior vertices of graph ``which`` (1 or 2) lying in ``shape``, length n+1."""
        key = (which, id(shape))
        if key not in self._masks:
            g = self.g1 if which == 1 else self.g2
            m = np.zeros(g.n + 1, dtype=bool)
            m[: g.n] = [shape.contains(p) for p in g.positions]
            self._masks[key] = m
        return self._masks[key]

    def to_global(self, which: int, verts) -> np.ndarray:
        g = self.g1 if which == 1 else self.g2
        v = np.asarray(verts, dtype=np.int64)
        out = np.full(len(v), -1, dtype=np.int64)
        inner = v < g.n
        out[inner] = g.vertices[v[inner]]
        return out

    def to_local(self, which: int, gverts) -> np.ndarray:
        g = self.g1 if which == 1 else self.g2
        gv = np.asarray(gverts, dtype=np.int64)
        out = np.full(len(gv), -1, dtype=np.int64)
        ok = gv >= 0
        out[ok] = g.local[gv[ok]]
        return out


# --- the E_r branch -------------------------------------------------------------------


def _boundary_loop(shape: Shape, origin: float, step: float) -> np.ndarray:
    from .dimer import boundary_arc

    return densify(boundary_arc(shape, origin, origin + shape.perimeter, step=step), step)


def _frame(shape: Shape, origin: float, pts: np.ndarray) -> tuple:
    """(boundary coordinate from the origin, signed distance: positive outside)."""
    pts = np.asarray(pts, float).reshape(-1, 2)
    P = shape.perimeter
    if isinstance(shape, Disc):
        d = pts - np.asarray(shape.center)
        rad = np.hypot(d[:, 0], d[:, 1])
        coord = (np.arctan2(d[:, 1], d[:, 0]) % (2 * math.pi)) * shape.radius
        return (coord - origin) % P, rad - shape.radius
    coord = np.array([shape.coordinate(p) for p in pts])
    dist = point_to_polyline_distance(pts, shape.boundary_polyline(512))
    sign = np.array([-1.0 if shape.contains(p) else 1.0 for p in pts])
    return (coord - origin) % P, sign * dist


_LOOPS = {}


def _loop_cache(shape: Shape, origin: float, step: float) -> np.ndarray:
    key = (repr(shape.to_dict()), origin, step)
    if key not in _LOOPS:
        _LOOPS[key] = _boundary_loop(shape, origin, step)
    return _LOOPS[key]


def _contains_all(shape: Shape, pts: np.ndarray) -> np.ndarray:
    if isinstance(shape, Disc):
        d = pts - np.asarray(shape.center)
        return np.hypot(d[:, 0], d[:, 1]) < shape.radius - 1e-12 * max(1.0, shape.radius)
    return np.array([shape.contains(p) for p in pts])


@dataclass(frozen=True)
class _MaskStage:
    """Stage given directly by vertex masks of one graph (duck-types CrossingRect)."""

    region: np.ndarray
    goal: np.ndarray

    def contains(self, pts):
        if len(pts) != len(self.region):
            raise ValueError("mask stage used on a different graph")
        return self.region

    def in_target(self, pts):
        return self.goal


@dataclass
class BranchReport:
    accepted: bool
    proposals: int
    t: int  # index where the branch leaves the boundary tube
    frechet: float
    method: str

    @property
    def acceptance_rate(self) -> float:
        return (1.0 if self.accepted else 0.0) / max(self.proposals, 1)


def check_Er(branch: SimplePath, D1: DomainSpec, r: float, mesh: float) -> tuple:
    """Both bullets of the event, with the split time found by scanning.

    Returns (holds, t, best Frechet distance). The prefix is compared with
    the boundary loop of D1 run in either direction from its origin.
    """
    shape = D1.shape
    origin = D1.origin
    pts = branch.points()
    step = mesh / 4
    loop = _loop_cache(shape, origin, step)
    # necessary condition: every boundary point lies within r of the branch
    probe = loop[:: max(1, len(loop) // 64)]
    if point_to_polyline_distance(probe, pts).max() > r:
        return False, -1, math.inf
    inside = _contains_all(shape, pts)
    t_min = int(np.flatnonzero(inside)[-1]) + 1 if inside.any() else 0
    if t_min >= len(pts):
        return False, -1, math.inf
    dense = [pts[:1]]
    idx = [0]
    for a, b in zip(pts[:-1], pts[1:]):
        k = max(1, int(math.ceil(np.hypot(*(b - a)) / step)))
        dense.append(a + (b - a) * (np.arange(1, k + 1)[:, None] / k))
        idx.append(idx[-1] + k)
    dense = np.vstack(dense)
    idx = np.asarray(idx)
    best, best_t = math.inf, -1
    for L in (loop, loop[::-1]):
        pref = frechet_prefixes(dense[: idx[-1] + 1], L)[idx]
        cand = pref[t_min:]
        j = int(np.argmin(cand))
        if cand[j] < best:
            best, best_t = float(cand[j]), t_min + j
    return best <= r, best_t, best


class ErSampler:
    """Samples the outer-domain branch from x0 conditioned on the event E_r.

    ``rejection`` resamples loop-erased walks until the event holds.
    ``tube`` proposes a walk conditioned to run once around the inner
    boundary inside the band of width r (window by window) and then to
    leave the outer domain without re-entering the band or the inner
    domain; its loop erasure is accepted when the event holds.
    """

    def __init__(self, setup: CouplingSetup, x0=None, method: Optional[str] = None, windows: Optional[int] = None):
        cfg = setup.cfg
        self.setup = setup
        self.method = method or cfg.branch_method
        g2 = setup.g2
        shape1 = cfg.D1.shape
        self.anchor = _boundary_loop(shape1, cfg.D1.origin, cfg.mesh)[0]
        if x0 is None:
            x0 = g2.nearest(self.anchor)
        self.x0 = int(x0)
        if np.hypot(*(g2.position(self.x0) - self.anchor)) >= cfg.r:
            raise ValueError("x0 must lie within r of the marked point of D1")
        if self.method == "tube":
            self._prepare_tube(windows)

    def _prepare_tube(self, windows):
        s = self.setup
        cfg = s.cfg
        g = s.g2
        r = cfg.r
        coord, dist = _frame(cfg.D1.shape, cfg.D1.origin, g.positions)
        P = cfg.D1.shape.perimeter
        band = np.abs(dist) < r
        K = windows or max(4, int(math.ceil(P / (4 * r))))
        L = P / K
        back = r / 2
        goal_w = max(r / 2, 1.5 * cfg.mesh)
        # the x0 window starts just below zero
        c = np.where(coord > P - back, coord - P, coord)
        stages = []
        for k in range(K - 1):
            region = band & (c >= k * L - back) & (c < (k + 1) * L)
            goal = region & (c >= (k + 1) * L - goal_w)
            stages.append(_MaskStage(region, goal))
        last_region = band & (coord >= (K - 1) * L - back)
        near = np.hypot(*(g.positions - self.anchor).T) < 0.9 * r
        last = last_region & near & (dist > 0) & (coord > P / 2)
        last[self.x0] = False
        if not last.any():
            raise ZeroProbabilityError("no vertex closes the lap; increase r or refine the mesh")
        n = g.n
        absorbing = np.append(last, True)
        success = np.append(last, False)[g.targets]
        lap = Condition(absorbing, success, tuple(stages), "lap around D1", confine=last_region)
        self.lap = HTransform(g, lap)
        avoid = np.append((dist < 0) | (band & ~last_region), True)
        tail = Condition(avoid, g.targets == n, (), "leave D2 outside the band")
        self.tail = HTransform(g, tail)
        self.last = last

    def propose(self, rng) -> WalkPath:
        g = self.setup.g2
        if self.method == "tube":
            a = self.lap.sample(self.x0, rng)
            if a.terminal == "step-cap":
                raise RuntimeError("lap proposal hit the step cap")
            b = self.tail.sample(int(a.end), rng)
            return WalkPath(g, np.concatenate([a.vertices, b.vertices[1:]]), np.concatenate([a.slots, b.slots]), b.terminal)
        return run_walk(g, self.x0, None, rng)

    def sample(self, rng=None, max_tries: Optional[int] = None) -> tuple:
        """(branch in D2, BranchReport)."""
        rng = make_rng(rng)
        cfg = self.setup.cfg
        tries = max_tries or cfg.max_tries
        best = math.inf
        for k in range(1, tries + 1):
            walk = self.propose(rng)
            br = forward_le(walk)
            ok, t, fr = check_Er(br, cfg.D1, cfg.r, cfg.mesh)
            best = min(best, fr)
            if ok:
                return br, BranchReport(True, k, t, fr, self.method)
        raise ConditioningFailure(tries)


def sample_Er_branch(config: CouplingConfig, x0=None, rng=None, setup: Optional[CouplingSetup] = None, method: Optional[str] = None) -> tuple:
    """Branch of the outer UST from x0 conditioned on E_r: (SimplePath, BranchReport)."""
    setup = setup or CouplingSetup(config)
    return ErSampler(setup, x0, method).sample(rng)


def er_acceptance(config: CouplingConfig, n: int, rng=None, setup: Optional[CouplingSetup] = None, chunk: int = 256) -> tuple:
    """Empirical P(E_r) for the unconditioned branch: (rate, stderr, hits)."""
    setup = setup or CouplingSetup(config)
    sampler = ErSampler(setup, method="rejection")
    rng = make_rng(rng)
    g = setup.g2
    hits = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        slots, lens = _kernels.lerw_batch(g.indptr, g.targets, g.cum, sampler.x0, 10**8, kernel_seed(rng), m, g.n + 1)
        for row, ln in zip(slots, lens):
            if ln <= 0:
                continue
            st = [int(s) for s in row[:ln]]
            verts = [sampler.x0] + [int(g.targets[s]) for s in st]
            ok, _, _ = check_Er(SimplePath(tuple(verts), tuple(st), g), config.D1, config.r, config.mesh)
            hits += ok
        done += m
    p = hits / n
    return p, math.sqrt(max(p * (1 - p), 1e-300) / n), hits


# --- reports ---------------------------------------------------------------------------


@dataclass
class CouplingReport:
    """Per-run records plus aggregate frequencies with binomial stderr."""

    kind: str
    runs: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def add(self, **rec):
        self.runs.append(rec)

    def frequency(self, key: str) -> tuple:
        vals = [bool(r[key]) for r in self.runs if r.get(key) is not None]
        if not vals:
            return math.nan, math.nan, 0
        p = sum(vals) / len(vals)
        return p, math.sqrt(p * (1 - p) / len(vals)), len(vals)

    def quantile(self, key: str, q: float) -> float:
        vals = [r[key] for r in self.runs if r.get(key) is not None and math.isfinite(r[key])]
        return float(np.quantile(vals, q)) if vals else math.nan

    def summary(self) -> dict:
        out = {"kind": self.kind, "n_runs": len(self.runs), "params": self.params}
        keys = sorted({k for r in self.runs for k, v in r.items() if isinstance(v, (bool, np.bool_))})
        for k in keys:
            p, se, m = self.frequency(k)
            out[k] = {"freq": p, "stderr": se, "n": m}
        nums = sorted({k for r in self.runs for k, v in r.items() if isinstance(v, float)})
        for k in nums:
            out[k] = {"q50": self.quantile(k, 0.5), "q95": self.quantile(k, 0.95), "max": self.quantile(k, 1.0)}
        return out

    def to_csv(self) -> str:
        keys = []
        for r in self.runs:
            keys += [k for k in r if k not in keys]
        lines = [",".join(keys)]
        for r in self.runs:
            lines.append(",".join(_csv_cell(r.get(k)) for k in keys))
        return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- upper coupling ---------------------------------------------------------------------


def _local_walk(g: WiredGraph, gedges: np.ndarray, start_local: int) -> WalkPath:
    """A global edge sequence, read as a walk in ``g`` (stopping at its cemetery)."""
    slots = np.fromiter((g.edge_slot[int(e)] for e in gedges), dtype=np.int64, count=len(gedges))
    verts = np.concatenate([[start_local], g.targets[slots]]) if len(slots) else np.array([start_local])
    return WalkPath(g, verts, slots, EXITED if verts[-1] == g.n else HIT_SET)


def _global_stop(setup: CouplingSetup, which: int, pt: PartialTree) -> np.ndarray:
    g = setup.g1 if which == 1 else setup.g2
    m = np.zeros(setup.lattice.n_vertices, dtype=np.bool_)
    m[g.vertices[pt.in_tree[: g.n]]] = True
    return m


def shared_wilson(setup: CouplingSetup, starts, rng, t1: Optional[PartialTree] = None, t2: Optional[PartialTree] = None, step_cap: int = 10**8) -> tuple:
    """Grow partial trees in both domains from the same trajectories.

    ``starts`` are global vertex ids lying in both domains. Each start gets
    one ambient walk; domain i uses it up to its own stopping time (exit
    from D_i or hitting the current tree in D_i). Returns (t1, t2).
    """
    g1, g2 = setup.g1, setup.g2
    t1 = t1.copy() if t1 is not None else PartialTree(g1)
    t2 = t2.copy() if t2 is not None else PartialTree(g2)
    b1 = g1.boundary_flag.astype(np.bool_)
    b2 = g2.boundary_flag.astype(np.bool_)
    for v in starts:
        v = int(v)
        l1, l2 = int(g1.local[v]), int(g2.local[v])
        if l1 < 0 or l2 < 0:
            raise ValueError(f"start {v} is not in both domains")
        if t1.in_tree[l1] and t2.in_tree[l2]:
            continue
        s1 = _global_stop(setup, 1, t1)
        s2 = _global_stop(setup, 2, t2)
        edges, n1, n2 = _kernels.shared_walk(
            setup.amb_indptr, setup.amb_edges, setup.amb_cum, setup.heads, v, s1, s2, b1, b2, step_cap, kernel_seed(rng)
        )
        if n1 < 0 or n2 < 0:
            raise RuntimeError("shared walk hit the step cap")
        for pt, g, loc, m in ((t1, g1, l1, n1), (t2, g2, l2, n2)):
            if pt.in_tree[loc]:
                continue
            br = forward_le(_local_walk(g, edges[:m], loc))
            pt.add_branch(br)
    return t1, t2


def _parent_edges(pt: PartialTree, verts_local) -> tuple:
    g = pt.graph
    return tuple(int(g.edge_ids[pt.parent[v]]) if pt.in_tree[v] and v < g.n else -1 for v in verts_local)


def restricted_agreement(setup: CouplingSetup, t1: PartialTree, t2: PartialTree, region: Shape) -> bool:
    """Same parent edge (global id) at every vertex of ``region``."""
    m = setup.mask(1, region)[: setup.g1.n]
    gv = setup.g1.vertices[m]
    return _parent_edges(t1, setup.to_local(1, gv)) == _parent_edges(t2, setup.to_local(2, gv))


def upper_coupling_experiment(
    config: CouplingConfig, n_runs: int, seed: int = 0, threads: int = 1, install_branch: bool = True, setup: Optional[CouplingSetup] = None
) -> CouplingReport:
    """Install the E_r branch in D2, then couple Wilson's algorithm from the U vertices.

    Records agreement of the two partial trees on U and on U1.
    """
    setup = setup or CouplingSetup(config)
    sampler = ErSampler(setup) if install_branch and not config.identical else None
    starts = setup.g1.vertices[setup.mask(1, config.U)[: setup.g1.n]]
    order = np.lexsort((setup.lattice.positions[starts, 0], setup.lattice.positions[starts, 1]))
    starts = starts[order]
    if len(starts) == 0:
        raise ValueError("U contains no lattice vertex")

    def one(i):
        rng = task_rng(seed, i)
        t2 = PartialTree(setup.g2)
        proposals = 0
        if sampler is not None:
            br, rep = sampler.sample(rng)
            t2.add_branch(br)
            proposals = rep.proposals
        t1, t2 = shared_wilson(setup, starts, rng, t2=t2)
        return dict(
            run=i,
            agree_U=restricted_agreement(setup, t1, t2, config.U),
            agree_U1=restricted_agreement(setup, t1, t2, config.U1),
            proposals=proposals,
        )

    report = CouplingReport("upper", params={"r": config.r, "mesh": config.mesh, "n_starts": int(len(starts)), "seed": seed})
    for rec in _map_runs(one, n_runs, threads):
        report.add(**rec)
    return report


# --- lower coupling -------------------------------------------------------------------


def _dist_to_shape(shape: Shape, pts) -> np.ndarray:
    """Euclidean distance to the closed region (zero inside)."""
    P = np.asarray(pts, float).reshape(-1, 2)
    if isinstance(shape, Disc):
        d = P - np.asarray(shape.center)
        return np.maximum(np.hypot(d[:, 0], d[:, 1]) - shape.radius, 0.0)
    out = point_to_polyline_distance(P, shape.boundary_polyline(512))
    out[_contains_all(shape, P)] = 0.0
    return out


def schedule_sets(graph: WiredGraph, cfg: CouplingConfig) -> tuple:
    """(odd sets: outside U3, even sets: U2) as interior masks of ``graph``."""
    pos = graph.positions
    in3 = _contains_all(cfg.U3, pos)
    in2 = _contains_all(cfg.U2, pos)
    return ~in3, in2


@dataclass
class Goodness:
    good: bool
    failing: Optional[str] = None
    quasiloops: int = 0
    i_max: int = 0


def epsilon_good(path, config: CouplingConfig, sets=None) -> Goodness:
    """The three regularity conditions on a path, checked literally.

    1. no (eps^2, eps)-quasiloop;
    2. at most 1/eps alternations of the schedule;
    3. after T_{2i-1}, from the first time within eps^2 of U2 until T_{2i},
       the path stays in the eps-ball around the point where that started.
    """
    eps = config.eps
    walk = path.as_walk() if isinstance(path, SimplePath) else path
    pts = walk.points()
    q = scan_quasiloops(pts, eps**2, eps)
    if q:
        return Goodness(False, "quasiloop", len(q))
    sets = sets if sets is not None else schedule_sets(walk.graph, config)
    sch = schedule(walk, sets)
    if sch.i_max > 1 / eps:
        return Goodness(False, "alternations", 0, sch.i_max)
    near = _dist_to_shape(config.U2, pts) <= eps**2
    times = sch.times
    for j in range(1, sch.i_max + 1, 2):
        if j + 1 > sch.i_max:
            break  # the last odd stretch never reaches U2
        a, b = times[j], times[j + 1]
        hits = np.flatnonzero(near[a : b + 1])
        if not len(hits):
            continue
        t = a + int(hits[0])
        if np.hypot(*(pts[t : b + 1] - pts[t]).T).max() >= eps:
            return Goodness(False, "approach", 0, sch.i_max)
    return Goodness(True, None, 0, sch.i_max)


@dataclass
class X2Result:
    X2: WalkPath  # the walk used for Y2
    Y2: SimplePath
    X2_tilde: WalkPath
    schedule: object
    loops_dropped: int
    frechet: float  # d(X2_tilde, Y2)
    frechet_hat: float  # d(X_hat, Y2): Y2 with the kept loops, before rearranging


def build_X2_tilde(setup: CouplingSetup, start: int, rng, tree: Optional[PartialTree] = None) -> X2Result:
    """Y2 from a walk in D2 (absorbed by ``tree``), dressed with small loops.

    The loops are the walk's own erased loops, split at their visits; loops
    of diameter above the cap are dropped (Poisson thinning), and the
    result is rearranged by the reversal map for the alternating schedule.
    """
    cfg = setup.cfg
    g = setup.g2
    stop = tree.in_tree if tree is not None else None
    X2 = run_walk(g, int(start), stop, rng)
    if X2.terminal == "step-cap":
        raise RuntimeError("walk hit the step cap")
    Y2 = forward_le(X2)
    blocks = loops_along(g, Y2, rng, walk=X2)
    total = sum(len(b) for b in blocks)
    X_hat = attach_small_loops(g, Y2, blocks, diameter_cap=cfg.cap)
    kept = _count_kept(g, blocks, cfg.cap)
    sched = schedule(X_hat, schedule_sets(g, cfg) if not hasattr(setup, "_sets2") else setup._sets2)
    Xt = reversal_map(X_hat, sched)
    if mixed_le(Xt, sched) != Y2:
        raise AssertionError("mixed loop erasure of the rearranged walk differs from Y2")
    y = Y2.points()
    return X2Result(X2, Y2, Xt, sched, total - kept, discrete_frechet(Xt.points(), y), discrete_frechet(X_hat.points(), y))


def _count_kept(g, blocks, cap) -> int:
    pos = g.positions
    from .geometry import diameter

    return sum(1 for b in blocks for lv, _ in b if diameter(pos[list(lv)]) <= cap)


class SegmentFailure(RuntimeError):
    pass


def _copy_segment(setup: CouplingSetup, X2t: WalkPath, a: int, b: int, stop1: np.ndarray) -> tuple:
    """X2t[a..b] read in D1; stops early on the D1 tree. (verts, slots, absorbed)."""
    g1, g2 = setup.g1, setup.g2
    verts, slots = [], []
    for k in range(a, b):
        e = int(g2.edge_ids[X2t.slots[k]])
        s = g1.edge_slot.get(e)
        if s is None:
            raise SegmentFailure("copied segment leaves D1")
        slots.append(s)
        verts.append(int(g1.targets[s]))
        if stop1[verts[-1]]:
            return verts, slots, True
    return verts, slots, False


def _fit_balls(rects: list, pos: np.ndarray, mesh: float) -> list:
    """Grow target balls that hold no vertex (near the boundary), up to max(w/2, 1.5 mesh)."""
    from dataclasses import replace as _replace

    out = []
    for rc in rects:
        cap = max(rc.width / 2, 1.5 * mesh)
        while not (rc.in_target(pos) & rc.contains(pos)).any():
            if rc.radius >= cap:
                break
            rc = _replace(rc, ball=min(cap, rc.radius + mesh / 4))
        out.append(rc)
    return out


def _follow(setup: CouplingSetup, curve: np.ndarray, cond: Condition, start: int, rng) -> WalkPath:
    cfg = setup.cfg
    w = 4 * cfg.tube
    rects = rectangles_following(curve, w, ball=max(w / 8, 0.75 * cfg.mesh)) if len(curve) > 1 else []
    rects = _fit_balls(rects, setup.g1.positions, cfg.mesh)
    try:
        ht = HTransform(setup.g1, cond.crossing(rects))
        return ht.sample(start, rng)
    except ZeroProbabilityError as exc:
        raise SegmentFailure(str(exc)) from exc


def build_X1_tilde(setup: CouplingSetup, res: X2Result, rng, tree1: Optional[PartialTree] = None, good: Optional[bool] = None) -> tuple:
    """Walk in D1 copying X2_tilde inside U3 and shadowing its image outside.

    Returns (walk, goodness flag). When Y2 is not good the walk is an
    independent walk in D1 from the same start.
    """
    cfg = setup.cfg
    g1 = setup.g1
    stop1 = tree1.in_tree.copy() if tree1 is not None else _stop_mask_n(g1)
    X2t = res.X2_tilde
    start = int(setup.to_local(1, setup.to_global(2, [X2t.start]))[0])
    if good is None:
        good = epsilon_good(res.Y2, cfg).good
    if not good:
        return run_walk(g1, start, stop1, rng), False
    in2 = np.append(schedule_sets(g1, cfg)[1], False)
    times = res.schedule.times
    i_max = res.schedule.i_max
    pts2 = X2t.points()
    verts, slots = [start], []
    for i in range(i_max + 1):
        a, b = times[i], times[i + 1]
        cur = verts[-1]
        if i % 2 == 0:
            v, s, hit = _copy_segment(setup, X2t, a, b, stop1)
            verts += v
            slots += s
            if hit:
                return WalkPath(g1, verts, slots, HIT_SET), True
            if i == i_max:
                rest = run_walk(g1, verts[-1], stop1, rng)  # X2t ended on its own tree
                return WalkPath(g1, verts + list(rest.vertices[1:]), slots + list(rest.slots), rest.terminal), True
            continue
        seg = setup.phi(pts2[a : b + 1])
        if i < i_max:
            target = int(g1.local[setup.g2.vertices[X2t.vertices[b]]])
            dist = _dist_to_shape(cfg.U2, pts2[a : b + 1])
            close = np.flatnonzero(dist <= cfg.eps**2 / 2)
            seg = seg[: int(close[0]) + 1] if len(close) else seg
            cond = hit_at(g1, target, in2 | stop1)
        else:
            cond = absorbed(g1, stop1)
        w = _follow(setup, seg, cond, cur, rng)
        if w.terminal == "step-cap":
            raise SegmentFailure("conditioned segment hit the step cap")
        verts += list(w.vertices[1:])
        slots += list(w.slots)
        if i == i_max or stop1[w.end] or w.end == g1.n:
            return WalkPath(g1, verts, slots, EXITED if verts[-1] == g1.n else HIT_SET), True
    return WalkPath(g1, verts, slots, EXITED if verts[-1] == g1.n else HIT_SET), True


def _stop_mask_n(g: WiredGraph) -> np.ndarray:
    m = np.zeros(g.n + 1, dtype=np.bool_)
    return m


def _edges_in(path: SimplePath, region_mask: np.ndarray, graph_edges_global) -> frozenset:
    g = path.graph
    return frozenset(int(g.edge_ids[s]) for v, s in zip(path.vertices[:-1], path.steps) if region_mask[v])


def lower_coupling_experiment(config: CouplingConfig, n_runs: int, seed: int = 0, threads: int = 1, starts=None, setup: Optional[CouplingSetup] = None) -> CouplingReport:
    """Couple LERW branches from ``starts`` in D2 and D1 through the walk construction.

    Per run records agreement inside U1 (and U), d(Y1~, phi(Y2)),
    d(X2~, Y2) and the goodness of every Y2.
    """
    setup = setup or CouplingSetup(config)
    g1, g2 = setup.g1, setup.g2
    if starts is None:
        starts = default_starts(setup, config.k)
    starts = [int(v) for v in starts]
    sets1 = schedule_sets(g1, config)
    setup._sets2 = schedule_sets(g2, config)
    mU1_1 = setup.mask(1, config.U1)
    mU1_2 = setup.mask(2, config.U1)
    mU_1 = setup.mask(1, config.U)
    mU_2 = setup.mask(2, config.U)

    def one(i):
        rng = task_rng(seed, i)
        t1, t2 = PartialTree(g1), PartialTree(g2)
        agree_U1 = agree_U = all_good = True
        d_x2 = d_hat = d_y = 0.0
        failing = None
        dropped = 0
        for v in starts:
            l1, l2 = int(g1.local[v]), int(g2.local[v])
            if t2.in_tree[l2] and t1.in_tree[l1]:
                continue
            res = build_X2_tilde(setup, l2, rng, t2)
            good = epsilon_good(res.Y2, config, setup._sets2)
            all_good &= good.good
            failing = failing or good.failing
            dropped += res.loops_dropped
            d_x2 = max(d_x2, res.frechet)
            d_hat = max(d_hat, res.frechet_hat)
            try:
                X1t, _ = build_X1_tilde(setup, res, rng, t1, good.good)
            except SegmentFailure as exc:
                return dict(run=i, agree_U1=False, agree_U=False, good=all_good, failing=f"segment: {exc}", d_X2_Y2=float(d_x2), d_Xhat_Y2=float(d_hat), d_Y1_Y2=math.nan, loops_dropped=dropped)
            sch1 = schedule(X1t, sets1)
            Y1 = mixed_le(X1t, sch1)
            d_y = max(d_y, discrete_frechet(Y1.points(), setup.phi(res.Y2.points())))
            e1 = _edges_in(Y1, mU1_1, None)
            e2 = _edges_in(res.Y2, mU1_2, None)
            agree_U1 &= e1 == e2
            agree_U &= _edges_in(Y1, mU_1, None) == _edges_in(res.Y2, mU_2, None)
            t1.add_branch(Y1)
            t2.add_branch(res.Y2)
        return dict(run=i, agree_U1=bool(agree_U1), agree_U=bool(agree_U), good=bool(all_good), failing=failing or "", d_X2_Y2=float(d_x2), d_Xhat_Y2=float(d_hat), d_Y1_Y2=float(d_y), loops_dropped=dropped)

    report = CouplingReport("lower", params={"r": config.r, "eps": config.eps, "mesh": config.mesh, "starts": starts, "seed": seed})
    for rec in _map_runs(one, n_runs, threads):
        report.add(**rec)
    return report


def default_starts(setup: CouplingSetup, k: int) -> list:
    """k well-spread global vertices of U (the first one nearest its centre)."""
    from .ust import farthest_points

    cfg = setup.cfg
    gv = setup.g1.vertices[setup.mask(1, cfg.U)[: setup.g1.n]]
    gv = np.array([v for v in gv if setup.g2.local[v] >= 0], dtype=np.int64)
    if len(gv) == 0:
        raise ValueError("U contains no lattice vertex")
    picks = farthest_points(setup.lattice.positions[gv], k)
    return [int(gv[j]) for j in picks]


# --- annulus ----------------------------------------------------------------------------


def _region(graph: WiredGraph, region) -> np.ndarray:
    """Interior mask from a shape, a mask, or a list of local vertex ids."""
    if isinstance(region, Shape):
        return _contains_all(region, graph.positions)
    arr = np.asarray(region)
    if arr.dtype == bool:
        return arr[: graph.n].copy()
    m = np.zeros(graph.n, dtype=bool)
    m[arr.astype(np.int64)] = True
    return m


def exterior_tree(graph: WiredGraph, V, rng, step_cap: int = 10**9) -> PartialTree:
    """Union of the UST branches started in ``V`` (Wilson's algorithm run from V only)."""
    Vm = _region(graph, V)
    order = np.flatnonzero(Vm).astype(np.int64)
    pt = PartialTree(graph)
    res = _kernels.wilson(graph.indptr, graph.targets, graph.cum, order, pt.in_tree, pt.parent, step_cap, kernel_seed(rng))
    if res < 0:
        raise RuntimeError("a Wilson walk hit the step cap")
    return pt


def annulus_experiment(graph: WiredGraph, pairs, n_runs: int, seed: int = 0, threads: int = 1) -> CouplingReport:
    """Frequency with which the exterior tree of V = D minus the U'_i avoids every U_i.

    ``pairs`` lists (U'_i, U_i) with U_i inside U'_i.
    """
    outer = [_region(graph, a) for a, _ in pairs]
    inner = [_region(graph, b) for _, b in pairs]
    for a, b in zip(outer, inner):
        if np.any(b & ~a):
            raise ValueError("each U_i must lie inside its U'_i")
    for i in range(len(outer)):
        for j in range(i + 1, len(outer)):
            if np.any(outer[i] & outer[j]):
                raise ValueError("the U'_i must be disjoint")
    V = ~np.any(outer, axis=0) if outer else np.ones(graph.n, dtype=bool)
    hit = np.any(inner, axis=0) if inner else np.zeros(graph.n, dtype=bool)

    def one(i):
        pt = exterior_tree(graph, V, task_rng(seed, i))
        touched = pt.in_tree[: graph.n] & hit
        return dict(run=i, avoid=not touched.any(), size=int(pt.in_tree[: graph.n].sum()))

    report = CouplingReport("annulus", params={"n_V": int(V.sum()), "n_U": int(hit.sum()), "seed": seed})
    for rec in _map_runs(one, n_runs, threads):
        report.add(**rec)
    return report


@dataclass
class ProductComparison:
    C: float  # max over the joint support of max(ratio, 1/ratio)
    tv: float
    support_joint: int
    support_product: int
    missing: int  # product configurations the joint never produces
    missing_mass: float  # their product probability

    def to_dict(self) -> dict:
        return dict(
            C=self.C, tv=self.tv, support_joint=self.support_joint, support_product=self.support_product, missing=self.missing, missing_mass=self.missing_mass
        )


def annulus_exact(graph: WiredGraph, pairs, max_vertices: int = 9) -> ProductComparison:
    """Joint law of the tree restricted to V and each U_i against the product of its marginals.

    Exact, by enumerating every spanning tree. Restrictions are the sets of
    parent edges (global ids) of the vertices in the region.
    """
    from fractions import Fraction

    from .ust import exact_tree_distribution

    outer = [_region(graph, a) for a, _ in pairs]
    inner = [_region(graph, b) for _, b in pairs]
    V = ~np.any(outer, axis=0) if outer else np.ones(graph.n, dtype=bool)
    regions = [V] + inner
    tails = {}
    for k, e in enumerate(graph.edge_ids):
        tails[int(e)] = int(graph.rows[k])
    joint, marg = {}, [dict() for _ in regions]
    for key, p in exact_tree_distribution(graph, max_vertices).items():
        parts = tuple(tuple(e for e in key if m[tails[e]]) for m in regions)
        joint[parts] = joint.get(parts, Fraction(0)) + p
        for j, part in enumerate(parts):
            marg[j][part] = marg[j].get(part, Fraction(0)) + p
    import itertools

    C = 1.0
    tv = Fraction(0)
    total_prod = 0
    missing = 0
    missing_mass = Fraction(0)
    for combo in itertools.product(*[list(m.items()) for m in marg]):
        parts = tuple(c for c, _ in combo)
        q = Fraction(1)
        for _, pr in combo:
            q *= pr
        p = joint.get(parts, Fraction(0))
        total_prod += 1
        tv += abs(p - q)
        if p == 0:
            missing += 1
            missing_mass += q
            continue
        ratio = p / q
        C = max(C, float(ratio), float(1 / ratio))
    return ProductComparison(C, float(tv / 2), len(joint), total_prod, missing, float(missing_mass))
