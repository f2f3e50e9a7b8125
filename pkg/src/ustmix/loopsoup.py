"""Random-walk loop measure and loop soups on a wired graph.

A loop is stored as a tuple of CSR slots; its vertices follow from
``graph.rows``. Masses are exact Fractions when the graph carries exact
weights and floats otherwise.

Two samplers live here. ``sample_soup`` enumerates every loop up to a length
cutoff (small regions only) and draws Poisson multiplicities.
``loops_along`` samples, exactly and without truncation, the part of a soup
that Construction-style attachment actually uses: for each vertex of an
erased path, the soup loops that visit it and no earlier path vertex.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .erasure import SimplePath, forward_decomposition
from .geometry import diameter
from .lattice import WiredGraph
from .rng import make_rng
from .walk import EXITED, HIT_SET, WalkPath


def _rotations_equal(seq, k) -> bool:
    return seq[k:] + seq[:k] == seq


def _min_rotation(seq: tuple) -> tuple:
    n = len(seq)
    return min(seq[k:] + seq[:k] for k in range(n))


def _slot_probs(graph: WiredGraph, exact: bool):
    if exact:
        return [graph.edge_prob_exact(int(e)) for e in graph.edge_ids]
    return graph.probs


@dataclass(frozen=True)
class RootedLoop:
    graph: WiredGraph = field(compare=False, hash=False, repr=False)
    steps: tuple

    def __post_init__(self):
        if not self.steps:
            raise ValueError("empty loop")
        g = self.graph
        for a, b in zip(self.steps, self.steps[1:] + self.steps[:1]):
            if g.targets[a] != g.rows[b]:
                raise ValueError("steps do not form a closed cycle")

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def vertices(self) -> tuple:
        v = [int(self.graph.rows[s]) for s in self.steps]
        return tuple(v + v[:1])

    @property
    def root(self) -> int:
        return int(self.graph.rows[self.steps[0]])

    def weight(self, exact: bool = False):
        q = _slot_probs(self.graph, exact)
        w = Fraction(1) if exact else 1.0
        for s in self.steps:
            w *= q[s]
        return w

    def mass(self, exact: bool = False):
        return self.weight(exact) / self.length

    def unrooted(self) -> "UnrootedLoop":
        return UnrootedLoop(self.graph, _min_rotation(self.steps))


@dataclass(frozen=True)
class UnrootedLoop:
    """Rotation class of a loop, represented by its minimal rotation."""

    graph: WiredGraph = field(compare=False, hash=False, repr=False)
    steps: tuple

    def __post_init__(self):
        if self.steps != _min_rotation(self.steps):
            raise ValueError("representative is not rotation-minimal")

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def symmetry(self) -> int:
        """J: number of rotations fixing the cycle."""
        return sum(_rotations_equal(self.steps, k) for k in range(self.length))

    @property
    def vertices(self) -> tuple:
        return RootedLoop(self.graph, self.steps).vertices

    def weight(self, exact: bool = False):
        return RootedLoop(self.graph, self.steps).weight(exact)

    def mass(self, exact: bool = False):
        return self.weight(exact) / self.symmetry

    def visits(self, v: int) -> list:
        """Indices k with rows[steps[k]] == v (one per visit)."""
        return [k for k, s in enumerate(self.steps) if self.graph.rows[s] == v]

    def rooted_at(self, k: int) -> tuple:
        return self.steps[k:] + self.steps[:k]

    def diameter(self) -> float:
        return diameter(self.graph.positions[list(self.vertices[:-1])])


@dataclass
class LoopSoup:
    graph: WiredGraph = field(repr=False)
    loops: list  # (UnrootedLoop, multiplicity)
    region: Optional[frozenset] = None
    L_max: Optional[int] = None
    diameter_cap: Optional[float] = None

    def __post_init__(self):
        if self.region is not None:
            for lp, _ in self.loops:
                if not set(lp.vertices) <= self.region:
                    raise ValueError("soup loop leaves the region")
        if self.diameter_cap is not None:
            for lp, _ in self.loops:
                if lp.diameter() > self.diameter_cap:
                    raise ValueError("soup loop exceeds the diameter cap")

    @property
    def count(self) -> int:
        return sum(m for _, m in self.loops)

    def instances(self) -> list:
        out = []
        for lp, m in self.loops:
            out += [lp] * m
        return out

    def to_csv(self, exact: bool = False) -> str:
        buf = io.StringIO()
        buf.write("cycle,length,mass,multiplicity\n")
        for lp, m in self.loops:
            cyc = " ".join(str(v) for v in lp.vertices)
            buf.write(f"{cyc},{lp.length},{lp.mass(exact)},{m}\n")
        return buf.getvalue()


# --- enumeration -----------------------------------------------------------------


def _region_mask(graph: WiredGraph, region) -> np.ndarray:
    mask = np.zeros(graph.n + 1, dtype=bool)
    if region is None:
        mask[: graph.n] = True
    else:
        mask[np.asarray(sorted(region), dtype=np.int64)] = True
    return mask


def _closed_walk_count(graph: WiredGraph, mask, L_max: int) -> float:
    n = graph.n
    A = np.zeros((n, n))
    m = mask[graph.rows] & mask[graph.targets] & (graph.targets < n)
    np.add.at(A, (graph.rows[m], graph.targets[m]), 1.0)
    total = 0.0
    P = np.eye(n)
    for _ in range(L_max):
        P = P @ A
        total += np.trace(P)
    return total


def enumerate_loops(graph: WiredGraph, region=None, L_max: int = 6, exact: Optional[bool] = None, budget: int = 2_000_000) -> list:
    """All unrooted loops of length <= L_max inside ``region``, with masses."""
    if exact is None:
        exact = graph.n <= 64
    mask = _region_mask(graph, region)
    est = _closed_walk_count(graph, mask, L_max)
    if est > budget:
        raise ValueError(f"about {int(est)} rooted closed walks exceed the budget {budget}")
    out = []
    indptr, targets = graph.indptr, graph.targets
    for root in np.flatnonzero(mask[: graph.n]):
        root = int(root)
        stack = [(root, ())]
        while stack:
            v, steps = stack.pop()
            if len(steps) >= L_max:
                continue
            for s in range(indptr[v], indptr[v + 1]):
                t = int(targets[s])
                if not mask[t] or t == graph.n:
                    continue
                nxt = steps + (s,)
                if t == root and nxt == _min_rotation(nxt):
                    lp = UnrootedLoop(graph, nxt)
                    out.append((lp, lp.mass(exact)))
                stack.append((t, nxt))
    out.sort(key=lambda x: (x[0].length, x[0].steps))
    return out


def total_mass_by_length(graph: WiredGraph, region, n: int, exact: Optional[bool] = None):
    """tr(Q^n)/n for the kernel restricted to ``region``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    mask = _region_mask(graph, region)
    idx = np.flatnonzero(mask[: graph.n])
    if exact is None:
        exact = len(idx) <= 30
    loc = {int(v): k for k, v in enumerate(idx)}
    if exact:
        q = _slot_probs(graph, True)
        Q = [[Fraction(0)] * len(idx) for _ in idx]
        for s in range(len(graph.targets)):
            a, b = int(graph.rows[s]), int(graph.targets[s])
            if a in loc and b in loc:
                Q[loc[a]][loc[b]] += q[s]
        P = [row[:] for row in Q]
        for _ in range(n - 1):
            P = [[sum(P[i][k] * Q[k][j] for k in range(len(idx)) if P[i][k]) for j in range(len(idx))] for i in range(len(idx))]
        return sum(P[i][i] for i in range(len(idx))) / n
    Q = _dense_kernel(graph, idx)
    return float(np.trace(np.linalg.matrix_power(Q, n))) / n


def _dense_kernel(graph, idx):
    loc = np.full(graph.n + 1, -1)
    loc[idx] = np.arange(len(idx))
    m = (loc[graph.rows] >= 0) & (loc[graph.targets] >= 0)
    Q = np.zeros((len(idx), len(idx)))
    np.add.at(Q, (loc[graph.rows[m]], loc[graph.targets[m]]), graph.probs[m])
    return Q


def tail_mass(graph: WiredGraph, region, L_max: int) -> float:
    """Mass of loops longer than L_max: sum_{n > L_max} tr(Q^n)/n.

    Exact from eigenvalues for regions up to 2000 vertices, otherwise an
    upper bound from the spectral radius.
    """
    mask = _region_mask(graph, region)
    idx = np.flatnonzero(mask[: graph.n])
    if len(idx) <= 2000:
        lam = np.linalg.eigvals(_dense_kernel(graph, idx))
        tot = -np.log(1 - lam)
        head = sum(lam**k / k for k in range(1, L_max + 1))
        return float(np.real(np.sum(tot - head)))
    import scipy.sparse.linalg as spla

    Q = graph.sparse_substochastic()[idx][:, idx]
    rho = float(abs(spla.eigs(Q, k=1, which="LM", return_eigenvectors=False)[0]))
    return len(idx) * rho ** (L_max + 1) / ((L_max + 1) * (1 - rho))


def sample_soup(graph: WiredGraph, region=None, L_max: int = 6, diameter_cap: Optional[float] = None, rng=None, loops=None) -> LoopSoup:
    """Poisson loop soup over the enumerated loops; large loops thinned out."""
    rng = make_rng(rng)
    loops = loops if loops is not None else enumerate_loops(graph, region, L_max, exact=False)
    masses = np.array([float(m) for _, m in loops])
    counts = rng.poisson(masses)
    keep = []
    for (lp, _), c in zip(loops, counts):
        if c and (diameter_cap is None or lp.diameter() <= diameter_cap):
            keep.append((lp, int(c)))
    reg = frozenset(int(v) for v in np.flatnonzero(_region_mask(graph, region)[: graph.n]))
    return LoopSoup(graph, keep, reg, L_max, diameter_cap)


# --- attachment to an erased path --------------------------------------------------


def _path_steps(gamma):
    if isinstance(gamma, SimplePath):
        return list(gamma.vertices), list(gamma.steps)
    return [int(v) for v in gamma.vertices], [int(s) for s in gamma.slots]


def attach_loops(gamma, soup: LoopSoup, rng=None) -> WalkPath:
    """Walk with prescribed forward erasure built from soup loops.

    Loops are put in uniform random order; loop k joins the block of the
    first path vertex it visits, rooted at a uniformly chosen visit there.
    Loops visiting no path vertex are dropped.
    """
    rng = make_rng(rng)
    g = soup.graph
    gv, gs = _path_steps(gamma)
    inst = soup.instances()
    order = rng.permutation(len(inst))
    inst = [inst[k] for k in order]
    pos = {v: i for i, v in enumerate(gv)}
    blocks = [[] for _ in gv]
    for lp in inst:
        hit = [pos[v] for v in lp.vertices[:-1] if v in pos]
        if not hit:
            continue
        i = min(hit)
        visits = lp.visits(gv[i])
        k = visits[int(rng.integers(len(visits)))]
        blocks[i].append(lp.rooted_at(k))
    verts, slots = [gv[0]], []
    for i in range(len(gv)):
        for steps in blocks[i]:
            slots += steps
            verts += [int(g.targets[s]) for s in steps]
        if i < len(gs):
            slots.append(gs[i])
            verts.append(gv[i + 1])
    term = EXITED if verts[-1] == g.n else HIT_SET
    return WalkPath(g, verts, slots, term)


def split_loop(lv, ls, rng) -> list:
    """Cut a loop at its root into soup loops.

    With k excursions from the root, the block lengths are the cycle lengths
    of a uniform permutation of k, in uniformly random order; this is the
    conditional law of the soup loops given their concatenation.
    """
    x = lv[0]
    cuts = [0] + [t for t in range(1, len(lv)) if lv[t] == x]
    k = len(cuts) - 1
    if k == 0:
        return []
    perm = rng.permutation(k)
    seen = np.zeros(k, dtype=bool)
    lengths = []
    for a in range(k):
        if seen[a]:
            continue
        c = 0
        b = a
        while not seen[b]:
            seen[b] = True
            b = perm[b]
            c += 1
        lengths.append(c)
    rng.shuffle(lengths)
    out = []
    e = 0
    for j in lengths:
        a, b = cuts[e], cuts[e + j]
        out.append((lv[a : b + 1], ls[a:b]))
        e += j
    return out


def loops_along(graph: WiredGraph, gamma, rng=None, walk=None) -> list:
    """Soup loops attached to each vertex of an erased path, sampled exactly.

    Returns a list (one entry per vertex of ``gamma`` except the last) of
    lists of rooted loops ``(vertices, slots)``. If ``walk`` is a walk whose
    forward erasure is ``gamma``, its own loops are split instead of
    sampling fresh ones, which couples the two constructions.
    """
    rng = make_rng(rng)
    if walk is not None:
        verts = [int(v) for v in walk.vertices]
        slots = [int(s) for s in walk.slots]
        gv, _, loops = forward_decomposition(verts, slots)
        if isinstance(gamma, (SimplePath, WalkPath)) and list(_path_steps(gamma)[0]) != gv:
            raise ValueError("walk does not erase to gamma")
        return [split_loop(lv, ls, rng) for lv, ls in loops[:-1]]
    from . import _kernels
    from .rng import kernel_seed

    gv, _ = _path_steps(gamma)
    n = graph.n
    stop = np.zeros(n + 1, dtype=np.bool_)
    out = []
    for i, x in enumerate(gv[:-1]):
        if i > 0:
            stop[gv[i - 1]] = True
        v, s, flag = _kernels.walk(graph.indptr, graph.targets, graph.cum, x, stop, 10**9, kernel_seed(rng))
        if flag:
            raise RuntimeError("step cap reached while sampling loops")
        v = v.tolist()
        last = max(t for t, u in enumerate(v) if u == x)
        out.append(split_loop(v[: last + 1], s[:last].tolist(), rng))
    return out


def attach_small_loops(graph: WiredGraph, gamma, blocks, diameter_cap: Optional[float] = None) -> WalkPath:
    """Reassemble a walk from per-vertex loop blocks, dropping large ones.

    Dropping loops above the cap is Poisson thinning, so the result has the
    law of the construction applied to a soup conditioned on all loops
    having diameter at most the cap.
    """
    gv, gs = _path_steps(gamma)
    pos = graph.positions
    verts, slots = [gv[0]], []
    for i in range(len(gv)):
        if i < len(blocks):
            for lv, ls in blocks[i]:
                if diameter_cap is not None and diameter(pos[list(lv)]) > diameter_cap:
                    continue
                verts += lv[1:]
                slots += ls
        if i < len(gs):
            slots.append(gs[i])
            verts.append(gv[i + 1])
    term = EXITED if verts[-1] == graph.n else HIT_SET
    return WalkPath(graph, verts, slots, term)


def large_loop_mass(graph: WiredGraph, center, radius: float, frac: float, L_max: int) -> float:
    """Enumerated mass of loops inside B(center, radius) with diameter > frac*radius."""
    c = np.asarray(center, float)
    inside = [v for v in range(graph.n) if np.hypot(*(graph.position(v) - c)) < radius]
    total = 0.0
    for lp, m in enumerate_loops(graph, inside, L_max, exact=False, budget=50_000_000):
        if lp.diameter() > frac * radius:
            total += float(m)
    return total


# --- enumeration oracle of the walk law --------------------------------------------


def enumerate_walks(graph: WiredGraph, start: int, max_len: int, exact: bool = True) -> dict:
    """Every walk from ``start`` to the cemetery of length <= max_len, with its probability."""
    q = _slot_probs(graph, exact)
    out = {}
    one = Fraction(1) if exact else 1.0
    stack = [(start, (), one)]
    n = graph.n
    while stack:
        v, steps, p = stack.pop()
        for s in range(graph.indptr[v], graph.indptr[v + 1]):
            t = int(graph.targets[s])
            ps = p * q[s]
            if t == n:
                out[steps + (s,)] = ps
            elif len(steps) + 1 < max_len:
                stack.append((t, steps + (s,), ps))
    return out
