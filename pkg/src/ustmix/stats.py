"""Empirical restriction laws, total variation and likelihood-ratio reports.

Samples are hashable keys (see :mod:`ustmix.stats` key builders). A sample
set is either an iterable of keys or a mapping key -> weight (counts or
exact probabilities); both are turned into :class:`Empirical` count maps,
which merge associatively.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import _kernels
from .geometry import Disc, Shape
from .lattice import DomainSpec, WiredGraph, discretize, lattice_for
from .rng import make_rng, task_seed

INF = math.inf
DEFAULT_C_GRID = (1.0 + 1e-9, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0, 20.0, 50.0, 100.0)
SHIFT_C_GRID = DEFAULT_C_GRID + (200.0, 500.0, 1e3, 1e4)


# --- keys ---------------------------------------------------------------------------


def tree_restriction(graph: WiredGraph, parent, region: np.ndarray) -> tuple:
    """Sorted global ids of the parent edges of the interior vertices in ``region``."""
    parent = np.asarray(parent)
    idx = np.flatnonzero(region[: graph.n])
    return tuple(sorted(int(graph.edge_ids[parent[v]]) for v in idx))


def dimer_restriction(matching, vertices) -> tuple:
    """Matched pairs touching ``vertices`` (superposition ids), sorted."""
    vs = set(int(v) for v in vertices)
    return tuple(sorted(p for p in matching.pairs() if p[0] in vs or p[1] in vs))


def height_restriction(heights, faces, digits: int = 6) -> tuple:
    """Heights on the given faces, rounded so that equal fields encode equally."""
    h = np.asarray(heights, float)[list(faces)]
    return tuple(float(x) for x in np.round(h, digits) + 0.0)


def RestrictionKey(mode: str, *args, **kw) -> tuple:
    """Dispatch to the tree, dimer or height encoder."""
    if mode == "tree":
        return tree_restriction(*args, **kw)
    if mode == "dimer":
        return dimer_restriction(*args, **kw)
    if mode == "height":
        return height_restriction(*args, **kw)
    raise ValueError(f"unknown key mode {mode!r}")


@dataclass(frozen=True)
class CoarseKey:
    """Connectivity of k marked points inside U plus the sectors where their branches leave U.

    The key only depends on the tree inside U. Codes from
    :func:`coarse_keys` decode with :meth:`decode`.
    """

    k: int
    n_sectors: int

    def decode(self, code: int) -> tuple:
        if code < 0:
            raise ValueError("negative code marks a failed run")
        sectors = []
        for _ in range(self.k):
            code, s = divmod(code, self.n_sectors)
            sectors.append(s)
        labels = []
        for _ in range(self.k):
            code, c = divmod(code, self.k)
            labels.append(c)
        return tuple(reversed(labels)), tuple(reversed(sectors))


@dataclass
class CoarseSampler:
    """Samples coarse keys of the wired UST restricted to a disc-like region U."""

    graph: WiredGraph
    U: Shape
    k: int = 3
    n_sectors: int = 4
    marked: Optional[np.ndarray] = None

    def __post_init__(self):
        g = self.graph
        pos = g.positions
        self.in_u = np.array([self.U.contains(p) for p in pos], dtype=np.bool_)
        if not self.in_u.any():
            raise ValueError("U holds no vertex")
        c = np.asarray(self.U.center if isinstance(self.U, Disc) else pos[self.in_u].mean(axis=0))
        ang = np.arctan2(pos[:, 1] - c[1], pos[:, 0] - c[0]) % (2 * math.pi)
        sec = np.minimum((ang / (2 * math.pi) * self.n_sectors).astype(np.int64), self.n_sectors - 1)
        self.sector = np.append(sec, 0)
        if self.marked is None:
            self.marked = default_marked(g, self.U, self.k, c)
        self.marked = np.asarray(self.marked, dtype=np.int64)
        self.key = CoarseKey(len(self.marked), self.n_sectors)

    def sample(self, n: int, seed: int, chunk: int = 20_000, step_cap: int = 10**9) -> np.ndarray:
        out = []
        g = self.graph
        for j, a in enumerate(range(0, n, chunk)):
            m = min(chunk, n - a)
            codes = _kernels.coarse_key_batch(
                g.indptr, g.targets, g.cum, self.marked, self.in_u, self.sector, self.n_sectors, step_cap, task_seed(seed, j), m
            )
            if np.any(codes < 0):
                raise RuntimeError("a walk hit the step cap")
            out.append(codes)
        return np.concatenate(out) if out else np.empty(0, np.int64)


def default_marked(graph: WiredGraph, U: Shape, k: int, center) -> np.ndarray:
    """The vertex nearest the centre of U and k-1 points on a circle of half its inradius."""
    pos = graph.positions
    rad = U.radius / 2 if isinstance(U, Disc) else 0.0
    pts = [np.asarray(center, float)]
    for j in range(k - 1):
        t = 2 * math.pi * j / max(k - 1, 1)
        pts.append(np.asarray(center) + rad * np.array([math.cos(t), math.sin(t)]))
    out = []
    for p in pts:
        v = int(np.argmin(np.hypot(*(pos - p).T)))
        if v not in out:
            out.append(v)
    return np.array(out, dtype=np.int64)


# --- empirical laws -------------------------------------------------------------------


@dataclass
class Empirical:
    counts: dict
    total: object  # int or Fraction

    @classmethod
    def of(cls, samples) -> "Empirical":
        if isinstance(samples, Empirical):
            return samples
        if isinstance(samples, Mapping):
            counts = dict(samples)
        else:
            arr = samples
            if isinstance(arr, np.ndarray) and arr.ndim == 1:
                vals, cnt = np.unique(arr, return_counts=True)
                counts = {v.item(): int(c) for v, c in zip(vals, cnt)}
            else:
                counts = dict(Counter(arr))
        total = sum(counts.values())
        if not total > 0:
            raise ValueError("empty sample set")
        return cls(counts, total)

    def merge(self, other: "Empirical") -> "Empirical":
        c = dict(self.counts)
        for k, v in other.counts.items():
            c[k] = c.get(k, 0) + v
        return Empirical(c, self.total + other.total)

    def prob(self, key):
        return self.counts.get(key, 0) / self.total


def tv_distance(P, Q) -> float:
    """Half the L1 distance between two empirical (or exact) laws."""
    P, Q = Empirical.of(P), Empirical.of(Q)
    keys = set(P.counts) | set(Q.counts)
    s = sum(abs(P.prob(k) - Q.prob(k)) for k in keys)
    return float(s / 2) if not isinstance(s, Fraction) else float(s / 2)


# --- likelihood ratios -------------------------------------------------------------------


@dataclass
class RnReport:
    ratios: dict  # key -> smoothed ratio nu1/nu2 (INF sentinel when unseen under nu2 with s=0)
    C_grid: tuple
    captured1: dict  # C -> nu1-mass of keys with 1/C <= ratio <= C
    captured2: dict
    n1: object
    n2: object
    support: int
    smoothing: float
    quantiles: dict = field(default_factory=dict)

    def min_C(self, mass: float = 0.9, both: bool = True) -> float:
        """Smallest C in the grid whose captured mass reaches ``mass`` (INF if none)."""
        for C in self.C_grid:
            if self.captured1[C] >= mass and (not both or self.captured2[C] >= mass):
                return C
        return INF

    def to_dict(self) -> dict:
        return {
            "C_grid": list(self.C_grid),
            "captured1": [self.captured1[C] for C in self.C_grid],
            "captured2": [self.captured2[C] for C in self.C_grid],
            "n1": float(self.n1),
            "n2": float(self.n2),
            "support": self.support,
            "smoothing": self.smoothing,
            "quantiles": self.quantiles,
        }

    def to_csv(self) -> str:
        lines = ["C,captured1,captured2"]
        for C in self.C_grid:
            lines.append(f"{C!r},{float(self.captured1[C])!r},{float(self.captured2[C])!r}")
        return "\n".join(lines) + "\n"


def rn_report(samples1, samples2, smoothing: float = 0.5, C_grid: Sequence[float] = DEFAULT_C_GRID) -> RnReport:
    """Smoothed per-key ratios and the mass each law puts on {1/C <= ratio <= C}.

    ratio(key) = [(c1 + s)/(n1 + sK)] / [(c2 + s)/(n2 + sK)] over the union
    support of size K. A zero denominator gives the INF sentinel (and a zero
    numerator gives 0); such keys are never captured.
    """
    P, Q = Empirical.of(samples1), Empirical.of(samples2)
    keys = sorted(set(P.counts) | set(Q.counts), key=repr)
    K = len(keys)
    s = smoothing
    exact = s == 0 and all(isinstance(v, (int, Fraction)) for v in list(P.counts.values()) + list(Q.counts.values()))
    ratios = {}
    for k in keys:
        a = (P.counts.get(k, 0) + s) / (P.total + s * K)
        b = (Q.counts.get(k, 0) + s) / (Q.total + s * K)
        if exact:
            a, b = Fraction(P.counts.get(k, 0)) / P.total, Fraction(Q.counts.get(k, 0)) / Q.total
        ratios[k] = INF if b == 0 else a / b
    cap1, cap2 = {}, {}
    for C in C_grid:
        inside = [k for k in keys if ratios[k] != INF and ratios[k] > 0 and 1 / C <= ratios[k] <= C]
        cap1[C] = float(sum(P.prob(k) for k in inside))
        cap2[C] = float(sum(Q.prob(k) for k in inside))
    finite = np.array([float(r) for r in ratios.values() if r != INF and r > 0])
    qs = {}
    if len(finite):
        lr = np.abs(np.log(finite))
        w = np.array([float(P.prob(k)) for k in keys if ratios[k] != INF and ratios[k] > 0])
        order = np.argsort(lr)
        cw = np.cumsum(w[order]) / max(w.sum(), 1e-300)
        for q in (0.5, 0.9, 0.95, 0.99):
            j = min(int(np.searchsorted(cw, q)), len(order) - 1)
            qs[str(q)] = float(math.exp(lr[order][j]))
    return RnReport(ratios, tuple(C_grid), cap1, cap2, P.total, Q.total, K, s, qs)


# --- events ---------------------------------------------------------------------------------


@dataclass
class EventReport:
    names: list
    pairs: list  # (nu1(A), nu2(A))
    upper: list  # f at each nu1(A): max nu2 over events with no larger nu1
    lower: list  # g at each nu1(A): min nu2 over events with no smaller nu1

    def envelope_holds(self) -> bool:
        return all(g <= q <= f for (_, q), f, g in zip(self.pairs, self.upper, self.lower))


def event_bound_check(samples1, samples2, events) -> EventReport:
    """(nu1(A), nu2(A)) for each event plus monotone envelopes g <= nu2 <= f.

    ``events`` are predicates on keys, or (name, predicate) pairs.
    """
    P, Q = Empirical.of(samples1), Empirical.of(samples2)
    names, pairs = [], []
    for j, ev in enumerate(events):
        name, pred = ev if isinstance(ev, tuple) else (getattr(ev, "__name__", f"A{j}"), ev)
        p = sum(c for k, c in P.counts.items() if pred(k)) / P.total
        q = sum(c for k, c in Q.counts.items() if pred(k)) / Q.total
        names.append(name)
        pairs.append((float(p), float(q)))
    xs = np.array([p for p, _ in pairs])
    ys = np.array([q for _, q in pairs])
    upper = [float(ys[xs <= x].max()) for x in xs]
    lower = [float(ys[xs >= x].min()) for x in xs]
    return EventReport(names, pairs, upper, lower)


# --- continuity ------------------------------------------------------------------------------


@dataclass
class CurveReport:
    param: str
    values: list
    tv: list
    noise: float  # TV between two independent reference samples of the same size
    n: int

    def stderr(self) -> float:
        """Rough binomial scale of a TV estimate: noise floor / 2."""
        return self.noise / 2

    def to_csv(self) -> str:
        lines = [f"{self.param},tv"]
        for v, t in zip(self.values, self.tv):
            lines.append(f"{float(v)!r},{float(t)!r}")
        return "\n".join(lines) + "\n"


def _keys_for(domain: DomainSpec, U: Shape, mesh: float, n: int, seed: int, k: int, n_sectors: int) -> np.ndarray:
    g = discretize(lattice_for(domain, mesh), domain)
    sampler = CoarseSampler(g, U, k, n_sectors, marked=_global_marked(g, U, k, mesh))
    return sampler.sample(n, seed)


def _global_marked(g: WiredGraph, U: Shape, k: int, mesh: float) -> np.ndarray:
    """Marked points chosen from continuum positions, so every domain uses the same points."""
    center = U.center if isinstance(U, Disc) else g.positions[[U.contains(p) for p in g.positions]].mean(axis=0)
    return default_marked(g, U, k, center)


def perturbed_disc(t: float, radius: float = 1.0, bumps: int = 5) -> DomainSpec:
    """Disc whose boundary radius is radius + t*|cos(bumps*theta)|: Hausdorff distance t from the disc."""
    from .geometry import Polygon

    if t == 0:
        return DomainSpec(Disc((0.0, 0.0), radius), marked=(radius, 0.0))
    th = np.linspace(0, 2 * math.pi, 361)[:-1]
    rr = radius + t * np.abs(np.cos(bumps * th))
    verts = [(float(r * math.cos(a)), float(r * math.sin(a))) for r, a in zip(rr, th)]
    return DomainSpec(Polygon(tuple(verts)), marked=verts[0])


def continuity_experiment(
    family: Callable[[float], DomainSpec],
    ts: Sequence[float],
    U: Shape,
    mesh: float,
    n: int,
    seed: int = 0,
    k: int = 3,
    n_sectors: int = 4,
) -> CurveReport:
    """TV between the coarse restriction laws in D(0) and D(t), for each t."""
    ref = _keys_for(family(0.0), U, mesh, n, task_seed(seed, 0), k, n_sectors)
    ref2 = _keys_for(family(0.0), U, mesh, n, task_seed(seed, 1), k, n_sectors)
    tvs = []
    for j, t in enumerate(ts):
        other = ref2 if t == 0 else _keys_for(family(t), U, mesh, n, task_seed(seed, 2 + j), k, n_sectors)
        tvs.append(tv_distance(ref, other))
    noise = tv_distance(ref, ref2)
    return CurveReport("t", list(ts), tvs, noise, n)


def large_domain_experiment(Rs: Sequence[float], U: Shape, mesh: float, n: int, seed: int = 0, k: int = 3, n_sectors: int = 4) -> CurveReport:
    """TV between the laws in the disc of radius R and the square of half-side R (both contain B(0,R))."""
    from .geometry import Rectangle

    ref_noise = None
    tvs = []
    for j, R in enumerate(Rs):
        a = _keys_for(DomainSpec(Disc((0.0, 0.0), R), marked=(R, 0.0)), U, mesh, n, task_seed(seed, 2 * j), k, n_sectors)
        b = _keys_for(DomainSpec(Rectangle(-R, -R, R, R), marked=(R, 0.0)), U, mesh, n, task_seed(seed, 2 * j + 1), k, n_sectors)
        tvs.append(tv_distance(a, b))
        if ref_noise is None:
            c = _keys_for(DomainSpec(Disc((0.0, 0.0), R), marked=(R, 0.0)), U, mesh, n, task_seed(seed, 10**6), k, n_sectors)
            ref_noise = tv_distance(a, c)
    return CurveReport("R", list(Rs), tvs, ref_noise or 0.0, n)


def stability_experiment(D1: DomainSpec, D2: DomainSpec, U: Shape, meshes: Sequence[float], n: int, seed: int = 0, k: int = 3, n_sectors: int = 4, C_grid=DEFAULT_C_GRID) -> dict:
    """rn_report of the coarse keys in D1 against D2 at each mesh, with the minimal C capturing 0.9."""
    out = {}
    for j, mesh in enumerate(meshes):
        a = _keys_for(D1, U, mesh, n, task_seed(seed, 2 * j), k, n_sectors)
        b = _keys_for(D2, U, mesh, n, task_seed(seed, 2 * j + 1), k, n_sectors)
        rep = rn_report(a, b, C_grid=C_grid)
        out[mesh] = rep
    return out


# --- height shifts ---------------------------------------------------------------------------


@dataclass
class ShiftReport:
    shift: int
    report: RnReport
    stratified_fraction: float  # dimer keys whose conditional shift ratios stay in [1/C, C]
    strata: int
    C: float


def height_shift_experiment(
    graph: WiredGraph,
    U: Shape,
    shift: int,
    n: int,
    seed: int = 0,
    C: Optional[float] = None,
    min_count: int = 20,
    faces=None,
    C_grid: Sequence[float] = SHIFT_C_GRID,
) -> ShiftReport:
    """Law of the height field on U against the same law shifted by ``shift``.

    Keys are the heights on the faces of U (rounded). The stratified variant
    groups samples by the dimer configuration on U; within a stratum the
    field is fixed up to its additive constant, and the ratio of the
    stratum's constant law at h and at h - shift is checked against C
    (by default the smallest grid value capturing 0.9 of the full law).
    """
    from .dimer import build_superposition, height_faces, height_field, reference_ray, tree_to_dimer
    from .ust import wilson

    sup = build_superposition(graph)
    ray = reference_ray(sup)
    quads = height_faces(sup)
    if faces is None:
        cents = np.array([sup.pos[list(q)].mean(axis=0) for q in quads])
        faces = [f for f, c in enumerate(cents) if U.contains(c)]
    if not faces:
        raise ValueError("U holds no face")
    verts = sorted({v for f in faces for v in quads[f]})
    rng = make_rng(seed)
    keys, strata = [], []
    for _ in range(n):
        tree, _ = wilson(graph, rng=rng, log=False)
        hf = height_field(tree, sup, ray=ray, faces=faces)
        keys.append(height_restriction(hf.heights, range(len(faces))))
        strata.append(dimer_restriction(tree_to_dimer(tree, sup), verts))
    shifted = [tuple(round(h + shift, 6) + 0.0 for h in k) for k in keys]
    rep = rn_report(keys, shifted, C_grid=C_grid)
    if C is None:
        C = rep.min_C(both=False)
    groups = {}
    for k, s in zip(keys, strata):
        groups.setdefault(s, []).append(k[0])
    good = total = 0
    for s, hs in groups.items():
        if len(hs) < min_count:
            continue
        total += 1
        sub = rn_report(hs, [round(h + shift, 6) + 0.0 for h in hs], C_grid=(C,))
        if sub.captured1[C] >= 0.9:
            good += 1
    return ShiftReport(shift, rep, good / total if total else math.nan, total, C)
