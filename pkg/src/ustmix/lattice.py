"""Embedded weighted oriented planar graphs and their wired discretizations."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import _exact
from .geometry import Shape, shape_from_dict

log = logging.getLogger(__name__)

CEMETERY_ID = -1


@dataclass(eq=False)
class EmbeddedGraph:
    """Oriented weighted graph with vertex positions and edge polylines.

    Vertex and edge ids are their indices. `polylines[e]` is ``None`` for a
    straight segment from tail to head.
    """

    positions: np.ndarray
    tails: np.ndarray
    heads: np.ndarray
    weights: np.ndarray
    mesh: float
    polylines: Optional[list] = None
    density_bound: Optional[int] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        self.tails = np.asarray(self.tails, dtype=np.int64)
        self.heads = np.asarray(self.heads, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        if not self.mesh > 0:
            raise ValueError("mesh must be positive")
        if np.any(self.weights < 0):
            raise ValueError("edge weights must be nonnegative")
        order = np.argsort(self.tails, kind="stable")
        self.out_edges = order
        self.out_indptr = np.searchsorted(self.tails[order], np.arange(self.n_vertices + 1))
        if self.polylines is not None:
            for e, pl in enumerate(self.polylines):
                if pl is None:
                    continue
                pl = np.asarray(pl, float)
                if not (np.allclose(pl[0], self.positions[self.tails[e]]) and np.allclose(pl[-1], self.positions[self.heads[e]])):
                    raise ValueError(f"polyline of edge {e} does not join its endpoints")
                self.polylines[e] = pl

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.tails)

    def edge_polyline(self, e: int) -> np.ndarray:
        if self.polylines is not None and self.polylines[e] is not None:
            return self.polylines[e]
        return self.positions[[self.tails[e], self.heads[e]]]

    def out_of(self, v: int) -> np.ndarray:
        return self.out_edges[self.out_indptr[v] : self.out_indptr[v + 1]]

    def to_dict(self) -> dict:
        return {
            "mesh": self.mesh,
            "vertices": [{"id": i, "x": float(x), "y": float(y)} for i, (x, y) in enumerate(self.positions)],
            "edges": [
                {
                    "id": e,
                    "tail": int(self.tails[e]),
                    "head": int(self.heads[e]),
                    "weight": float(self.weights[e]),
                    "polyline": self.edge_polyline(e).tolist(),
                }
                for e in range(self.n_edges)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EmbeddedGraph":
        verts = sorted(d["vertices"], key=lambda v: v["id"])
        if [v["id"] for v in verts] != list(range(len(verts))):
            raise ValueError("vertex ids must be 0..n-1")
        edges = sorted(d["edges"], key=lambda e: e["id"])
        pos = np.array([[v["x"], v["y"]] for v in verts], dtype=float).reshape(-1, 2)
        polys = []
        for e in edges:
            pl = np.asarray(e.get("polyline") or [], float)
            polys.append(None if len(pl) <= 2 else pl)
        return cls(
            pos,
            [e["tail"] for e in edges],
            [e["head"] for e in edges],
            [e["weight"] for e in edges],
            float(d["mesh"]),
            polys if any(p is not None for p in polys) else None,
        )


def _density(positions: np.ndarray, mesh: float) -> int:
    cells = np.floor(positions / mesh + 1e-9).astype(np.int64)
    _, counts = np.unique(cells, axis=0, return_counts=True)
    return int(counts.max()) if len(counts) else 0


def build_square_lattice(mesh: float, box: Sequence[float], density_bound: int = 4) -> EmbeddedGraph:
    """Unit-weight mesh*Z^2 restricted to ``box = (x0, y0, x1, y1)``.

    Every pair of nearest neighbours is joined by two oriented edges.
    """
    if not mesh > 0:
        raise ValueError("mesh must be positive")
    x0, y0, x1, y1 = map(float, box)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate bounding box {tuple(box)}")
    i0, i1 = math.ceil(x0 / mesh - 1e-9), math.floor(x1 / mesh + 1e-9)
    j0, j1 = math.ceil(y0 / mesh - 1e-9), math.floor(y1 / mesh + 1e-9)
    nx, ny = i1 - i0 + 1, j1 - j0 + 1
    if nx < 1 or ny < 1:
        raise ValueError("box contains no lattice point")
    I, J = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
    pos = np.column_stack([I.ravel() * mesh, J.ravel() * mesh])
    idx = np.arange(nx * ny).reshape(ny, nx)
    tails, heads = [], []
    # right, up, left, down
    ii = I.ravel() - i0
    jj = J.ravel() - j0
    flat = np.arange(nx * ny)
    for di, dj in ((1, 0), (0, 1), (-1, 0), (0, -1)):
        ok = (ii + di >= 0) & (ii + di < nx) & (jj + dj >= 0) & (jj + dj < ny)
        tails.append(flat[ok])
        heads.append(idx[jj[ok] + dj, ii[ok] + di])
    tails = np.concatenate(tails)
    heads = np.concatenate(heads)
    order = np.lexsort((heads, tails))
    g = EmbeddedGraph(pos, tails[order], heads[order], np.ones(len(order)), mesh)
    dens = _density(pos, mesh)
    if dens > density_bound:
        raise AssertionError(f"density {dens} exceeds bound {density_bound}")
    g.density_bound = density_bound
    g.grid_shape = (ny, nx)
    g.grid_origin = (i0, j0)
    return g


# --- domains ----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DomainSpec:
    """Continuum domain with an optional marked boundary point.

    ``marked_side`` selects the prime end when the marked point lies on a slit.
    """

    shape: Shape
    marked: Optional[tuple] = None
    marked_side: int = 0

    def contains(self, p) -> bool:
        return self.shape.contains(p)

    @property
    def origin(self) -> float:
        if self.marked is None:
            return 0.0
        return self.shape.coordinate(self.marked, self.marked_side)

    def to_dict(self) -> dict:
        d = {"shape": self.shape.to_dict()}
        if self.marked is not None:
            d["marked"] = list(map(float, self.marked))
            d["marked_side"] = self.marked_side
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        unknown = set(d) - {"shape", "marked", "marked_side"}
        if unknown:
            raise ValueError(f"unknown domain keys {sorted(unknown)}")
        m = d.get("marked")
        return cls(shape_from_dict(d["shape"]), tuple(m) if m is not None else None, int(d.get("marked_side", 0)))


@dataclass(frozen=True)
class BoundaryEdge:
    edge: int  # global edge id
    tail: int  # local index of the interior tail
    weight: float
    point: tuple  # first contact with the boundary
    coord: float  # arc length from the marked point
    side: int = 0


class WiredGraph:
    """Interior of a domain plus a single absorbing cemetery vertex.

    Interior vertices are re-indexed ``0..n-1``; the cemetery is ``n``. The
    jump kernel is stored in CSR form: row ``v`` lists ``(target, prob,
    edge id)`` for every oriented edge leaving ``v`` in the ambient graph.
    """

    def __init__(self, graph: EmbeddedGraph, domain: Optional[DomainSpec], vertices, boundary: Sequence[BoundaryEdge]):
        self.graph = graph
        self.domain = domain
        self.vertices = np.asarray(vertices, dtype=np.int64)
        n = len(self.vertices)
        if n == 0:
            raise ValueError("domain has empty interior")
        self.n = n
        self.cemetery = n
        self.local = np.full(graph.n_vertices, -1, dtype=np.int64)
        self.local[self.vertices] = np.arange(n)
        self.boundary = sorted(boundary, key=lambda b: (b.coord, b.edge))
        self.boundary_rank = {b.edge: k for k, b in enumerate(self.boundary)}
        self.boundary_flag = np.zeros(graph.n_edges, dtype=bool)
        for b in self.boundary:
            self.boundary_flag[b.edge] = True

        indptr = [0]
        targets, weights, eids = [], [], []
        for v in self.vertices:
            for e in graph.out_of(v):
                h = self.local[graph.heads[e]]
                if self.boundary_flag[e]:
                    targets.append(n)
                elif h >= 0:
                    targets.append(h)
                else:
                    continue
                weights.append(graph.weights[e])
                eids.append(e)
            indptr.append(len(targets))
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=float)
        self.edge_ids = np.asarray(eids, dtype=np.int64)
        tot = np.add.reduceat(self.weights, self.indptr[:-1]) if len(self.weights) else np.zeros(n)
        empty = self.indptr[1:] == self.indptr[:-1]
        tot = np.where(empty, 0.0, tot)
        if np.any(tot <= 0):
            bad = self.vertices[np.flatnonzero(tot <= 0)[0]]
            raise ValueError(f"vertex {bad} has no outgoing weight")
        self.out_weight = tot
        row = np.repeat(np.arange(n), np.diff(self.indptr))
        self.probs = self.weights / tot[row]
        self.rows = row
        cum = np.empty_like(self.probs)
        for v in range(n):
            a, b = self.indptr[v], self.indptr[v + 1]
            c = np.cumsum(self.probs[a:b])
            c[-1] = 1.0
            cum[a:b] = c
        self.cum = cum
        self.edge_slot = {int(e): k for k, e in enumerate(self.edge_ids)}
        self._check_kernel()

    def _check_kernel(self):
        sums = np.add.reduceat(self.probs, self.indptr[:-1])
        if np.any(np.abs(sums - 1) > 1e-12):
            raise AssertionError("kernel rows do not sum to one")

    # -- accessors --

    @property
    def positions(self) -> np.ndarray:
        return self.graph.positions[self.vertices]

    def position(self, v: int) -> np.ndarray:
        return self.graph.positions[self.vertices[v]]

    def slots(self, v: int) -> range:
        return range(self.indptr[v], self.indptr[v + 1])

    def edge_target(self, e: int) -> int:
        return int(self.targets[self.edge_slot[int(e)]])

    def edge_tail(self, e: int) -> int:
        return int(self.local[self.graph.tails[e]])

    def edge_prob(self, e: int) -> float:
        return float(self.probs[self.edge_slot[int(e)]])

    def edge_prob_exact(self, e: int) -> Fraction:
        k = self.edge_slot[int(e)]
        v = self.rows[k]
        a, b = self.indptr[v], self.indptr[v + 1]
        num = Fraction(self.weights[k])
        den = sum((Fraction(w) for w in self.weights[a:b]), Fraction(0))
        return num / den

    def boundary_edge(self, e: int) -> BoundaryEdge:
        return self.boundary[self.boundary_rank[int(e)]]

    def edge_geometry(self, e: int) -> np.ndarray:
        """Polyline of an edge, truncated at the boundary for boundary edges."""
        pl = self.graph.edge_polyline(int(e))
        if not self.boundary_flag[e]:
            return pl
        b = self.boundary_edge(e)
        out = [pl[0]]
        pt = np.asarray(b.point)
        for a, c in zip(pl[:-1], pl[1:]):
            ab = c - a
            L2 = float(ab @ ab)
            u = float((pt - a) @ ab) / L2 if L2 else 0.0
            if 0 <= u <= 1 and np.linalg.norm(a + u * ab - pt) < 1e-9 * max(1.0, math.sqrt(L2)):
                out.append(pt)
                return np.asarray(out)
            out.append(c)
        return np.asarray(out)

    def transition_matrix(self, exact: bool = False):
        """Dense (n, n+1) matrix of q(v -> v'), last column the cemetery."""
        n = self.n
        if exact:
            Q = [[Fraction(0)] * (n + 1) for _ in range(n)]
            for k in range(len(self.targets)):
                Q[self.rows[k]][self.targets[k]] += self.edge_prob_exact(self.edge_ids[k])
            return Q
        Q = np.zeros((n, n + 1))
        np.add.at(Q, (self.rows, self.targets), self.probs)
        return Q

    def sparse_substochastic(self, killed: Optional[np.ndarray] = None):
        """Sparse interior-to-interior kernel with optional killed vertices."""
        import scipy.sparse as sp

        mask = self.targets < self.n
        if killed is not None:
            mask &= ~killed[self.targets.clip(max=self.n - 1)] | (self.targets == self.n)
            mask &= self.targets < self.n
        return sp.csr_matrix((self.probs[mask], (self.rows[mask], self.targets[mask])), shape=(self.n, self.n))

    def vertices_in(self, shape: Shape) -> np.ndarray:
        """Local ids of interior vertices lying in an open shape."""
        return np.array([v for v in range(self.n) if shape.contains(self.position(v))], dtype=np.int64)

    def nearest(self, point) -> int:
        d = np.hypot(*(self.positions - np.asarray(point, float)).T)
        return int(np.argmin(d))

    # -- interchange --

    def to_dict(self) -> dict:
        d = self.graph.to_dict()
        d["domain"] = self.domain.to_dict() if self.domain is not None else None
        d["interior"] = [int(v) for v in self.vertices]
        d["cemetery"] = CEMETERY_ID
        d["boundary_edges"] = [
            {
                "edge": b.edge,
                "tail": int(self.vertices[b.tail]),
                "weight": b.weight,
                "point": list(b.point),
                "coord": b.coord,
                "side": b.side,
            }
            for b in self.boundary
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WiredGraph":
        known = {"mesh", "vertices", "edges", "domain", "interior", "cemetery", "boundary_edges"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown graph keys {sorted(unknown)}")
        g = EmbeddedGraph.from_dict(d)
        dom = DomainSpec.from_dict(d["domain"]) if d.get("domain") else None
        verts = np.asarray(d["interior"], dtype=np.int64)
        local = {int(v): i for i, v in enumerate(verts)}
        bnd = [
            BoundaryEdge(int(b["edge"]), local[int(b["tail"])], float(b["weight"]), tuple(b["point"]), float(b["coord"]), int(b.get("side", 0)))
            for b in d["boundary_edges"]
        ]
        return cls(g, dom, verts, bnd)


def dumps(obj) -> str:
    """JSON text with every float written to 17 significant digits."""

    def enc(o):
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (float, np.floating)):
            if not math.isfinite(o):
                raise ValueError("non-finite float in interchange document")
            return format(float(o), ".17g")
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, str):
            return json.dumps(o)
        if isinstance(o, dict):
            return "{" + ", ".join(f"{json.dumps(str(k))}: {enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple, np.ndarray)):
            return "[" + ", ".join(enc(v) for v in o) + "]"
        raise TypeError(f"cannot serialize {type(o)}")

    return enc(obj)


def graph_to_json(wg: WiredGraph) -> str:
    return dumps(wg.to_dict())


def graph_from_json(text: str) -> WiredGraph:
    return WiredGraph.from_dict(json.loads(text))


# --- discretization ---------------------------------------------------------


def discretize(graph: EmbeddedGraph, domain: DomainSpec) -> WiredGraph:
    """Restrict ``graph`` to ``domain`` with wired boundary conditions.

    A vertex is interior when it lies in the open domain. An edge leaving an
    interior vertex becomes a boundary edge as soon as its polyline touches
    the boundary, even if its head is interior (slits).
    """
    shape = domain.shape
    inside = np.array([shape.contains(p) for p in graph.positions], dtype=bool)
    verts = np.flatnonzero(inside)
    if len(verts) == 0:
        raise ValueError("domain has empty interior")
    local = np.full(graph.n_vertices, -1, dtype=np.int64)
    local[verts] = np.arange(len(verts))
    perim = shape.perimeter
    origin = domain.origin
    boundary = []
    for v in verts:
        for e in graph.out_of(v):
            pl = graph.edge_polyline(e)
            hit = None
            for a, b in zip(pl[:-1], pl[1:]):
                h = shape.first_hit(a, b)
                if h is not None:
                    hit = h
                    break
            head_in = inside[graph.heads[e]]
            if hit is None:
                if not head_in:
                    raise ArithmeticError(
                        f"edge {e} from {graph.positions[v]} to {graph.positions[graph.heads[e]]} leaves the domain "
                        "without a detected boundary crossing"
                    )
                continue
            if hit.t == 0.0 and len(pl) >= 2 and hit.point == tuple(map(float, pl[0])):
                raise ArithmeticError(f"interior vertex {v} lies on the boundary")
            coord = (hit.coord - origin) % perim
            boundary.append(BoundaryEdge(int(e), int(local[v]), float(graph.weights[e]), hit.point, float(coord), hit.side))
    if domain.marked is None and not getattr(shape, "simply_connected", True):
        warnings.warn("boundary ordering of a non-simply-connected domain is not cyclic", stacklevel=2)
    return WiredGraph(graph, domain, verts, boundary)


def lattice_for(domain: DomainSpec, mesh: float, margin: int = 2) -> EmbeddedGraph:
    """Square lattice covering the bounding box of a domain with a margin."""
    x0, y0, x1, y1 = domain.shape.bbox()
    m = margin * mesh
    return build_square_lattice(mesh, (x0 - m, y0 - m, x1 + m, y1 + m))


def square_domain_graph(mesh: float, domain: DomainSpec) -> WiredGraph:
    return discretize(lattice_for(domain, mesh), domain)


def wired_from_edges(n_interior: int, edges, positions=None) -> WiredGraph:
    """Abstract wired graph from ``(tail, head, weight)`` triples.

    ``head=None`` denotes an edge to the cemetery. Positions default to the
    unit circle; boundary edges point to a far-away outside vertex.
    """
    if positions is None:
        ang = 2 * math.pi * np.arange(n_interior) / max(n_interior, 1)
        positions = np.column_stack([np.cos(ang), np.sin(ang)]) * 0.5
    positions = np.asarray(positions, float).reshape(-1, 2)
    outside = n_interior
    pos = np.vstack([positions, [[10.0, 10.0]]])
    tails, heads, weights = [], [], []
    for t, h, w in edges:
        tails.append(t)
        heads.append(outside if h is None else h)
        weights.append(w)
    g = EmbeddedGraph(pos, tails, heads, weights, 1.0)
    boundary = []
    for e in range(g.n_edges):
        if g.heads[e] == outside:
            boundary.append(BoundaryEdge(e, int(g.tails[e]), float(g.weights[e]), (10.0, 10.0), float(len(boundary)), 0))
    wg = WiredGraph(g, None, np.arange(n_interior), boundary)
    wg.exact_weights = [w for _, _, w in edges]
    return wg


def t3_graph() -> WiredGraph:
    """Two interior vertices joined both ways, each with one cemetery edge."""
    return wired_from_edges(2, [(0, 1, 1), (0, None, 1), (1, 0, 1), (1, None, 1)])


def grid_wired(k: int, mesh: float = 1.0) -> WiredGraph:
    """k x k interior square grid, wired along the outer square."""
    from .geometry import Rectangle

    L = (k + 1) * mesh
    return discretize(build_square_lattice(mesh, (0, 0, L, L)), DomainSpec(Rectangle(0, 0, L, L), marked=(0.0, 0.0)))


# --- matrix-tree -------------------------------------------------------------


def laplacian(wg: WiredGraph, exact: bool = False):
    """Weighted out-degree Laplacian with the cemetery row/column removed."""
    n = wg.n
    if exact:
        L = [[Fraction(0)] * n for _ in range(n)]
        for k in range(len(wg.targets)):
            v = wg.rows[k]
            w = _exact.to_fraction(_exact_weight(wg, k))
            L[v][v] += w
            t = wg.targets[k]
            if t < n:
                L[v][t] -= w
        return L
    L = np.zeros((n, n))
    np.add.at(L, (wg.rows, wg.rows), wg.weights)
    m = wg.targets < n
    np.add.at(L, (wg.rows[m], wg.targets[m]), -wg.weights[m])
    return L


def _exact_weight(wg: WiredGraph, k: int):
    w = wg.weights[k]
    ew = getattr(wg, "exact_weights", None)
    if ew is not None:
        return ew[int(wg.edge_ids[k])]
    return int(w) if float(w).is_integer() else Fraction(float(w))


def matrix_tree_weight(wg: WiredGraph, exact: Optional[bool] = None, max_exact: int = 200, log: bool = False):
    """Total weight of spanning trees oriented toward the cemetery.

    Exact (Fraction) arithmetic is used when all weights are integers and the
    interior is small; otherwise a float determinant. ``log=True`` returns the
    natural log, which avoids overflow on large graphs.
    """
    if exact is None:
        exact = wg.n <= max_exact and all(float(w).is_integer() for w in wg.weights)
    if exact:
        if wg.n > max_exact:
            raise ValueError(f"exact determinant limited to {max_exact} interior vertices (got {wg.n})")
        d = _exact.det(laplacian(wg, exact=True))
        if log:
            return math.log(d) if d > 0 else -math.inf
        return d.numerator if d.denominator == 1 else d
    L = laplacian(wg)
    sign, ld = np.linalg.slogdet(L)
    if sign <= 0:
        raise ArithmeticError("Laplacian is singular: some vertex cannot reach the cemetery")
    if log:
        return float(ld)
    if ld > 700:
        raise OverflowError(f"tree weight exp({ld:.1f}) overflows; use log=True")
    return float(math.exp(ld))
