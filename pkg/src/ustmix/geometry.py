"""Planar geometry: domain shapes, boundary crossings, winding and curve distances."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

EPS = 1e-12


def _as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, 2)
    return arr


def cross(a, b) -> float:
    return a[0] * b[1] - a[1] * b[0]


def segment_intersections(p, q, a, b, tol=1e-12):
    """Parameters (t, s) where segment p->q meets segment a->b.

    Returns a list with zero, one or two entries (two for collinear overlap,
    giving the overlap extremities along p->q).
    """
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    r = q - p
    s = b - a
    denom = cross(r, s)
    qp = a - p
    scale = max(1.0, float(np.abs(r).max()), float(np.abs(s).max()))
    if abs(denom) <= tol * scale * scale:
        if abs(cross(qp, r)) > tol * scale * scale:
            return []
        rr = float(r @ r)
        if rr <= tol:
            # degenerate p == q
            ss = float(s @ s)
            if ss <= tol:
                return [(0.0, 0.0)] if np.linalg.norm(a - p) <= tol else []
            u = float((p - a) @ s) / ss
            return [(0.0, u)] if -tol <= u <= 1 + tol else []
        t0 = float(qp @ r) / rr
        t1 = float((b - p) @ r) / rr
        lo, hi = max(0.0, min(t0, t1)), min(1.0, max(t0, t1))
        if lo > hi + tol:
            return []
        out = []
        for t in sorted({lo, hi}):
            pt = p + t * r
            ss = float(s @ s)
            u = float((pt - a) @ s) / ss if ss > 0 else 0.0
            out.append((t, min(max(u, 0.0), 1.0)))
        return out
    t = cross(qp, s) / denom
    u = cross(qp, r) / denom
    if -tol <= t <= 1 + tol and -tol <= u <= 1 + tol:
        return [(min(max(t, 0.0), 1.0), min(max(u, 0.0), 1.0))]
    return []


@dataclass(frozen=True)
class BoundaryHit:
    """First contact of a segment with a domain boundary."""

    t: float
    point: tuple
    coord: float
    side: int = 0


class Shape:
    """Bounded open planar set with a piecewise-smooth boundary."""

    simply_connected = True

    def contains(self, p) -> bool:
        raise NotImplementedError

    def first_hit(self, p, q) -> Optional[BoundaryHit]:
        raise NotImplementedError

    def on_boundary(self, p, tol: float = 1e-10) -> bool:
        return point_on_polyline(p, self.boundary_polyline(4096), closed=False, tol=tol)

    @property
    def perimeter(self) -> float:
        raise NotImplementedError

    def coordinate(self, point, side: int = 0) -> float:
        """Arc-length position of a boundary point (prime end for slits)."""
        raise NotImplementedError

    def boundary_polyline(self, n: int = 256) -> np.ndarray:
        raise NotImplementedError

    def bbox(self):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Disc(Shape):
    center: tuple = (0.0, 0.0)
    radius: float = 1.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("disc radius must be positive")

    def contains(self, p) -> bool:
        dx = p[0] - self.center[0]
        dy = p[1] - self.center[1]
        return math.hypot(dx, dy) < self.radius - 1e-12 * max(1.0, self.radius)

    def first_hit(self, p, q):
        c = np.asarray(self.center, float)
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        d = q - p
        f = p - c
        a = float(d @ d)
        if a == 0:
            return None
        b = 2 * float(f @ d)
        cc = float(f @ f) - self.radius**2
        disc = b * b - 4 * a * cc
        tol = 1e-12 * max(1.0, self.radius**2)
        if disc < -tol:
            return None
        disc = max(disc, 0.0)
        sq = math.sqrt(disc)
        ts = sorted(((-b - sq) / (2 * a), (-b + sq) / (2 * a)))
        ttol = 1e-12
        for t in ts:
            if -ttol <= t <= 1 + ttol:
                t = min(max(t, 0.0), 1.0)
                pt = p + t * d
                return BoundaryHit(t, (float(pt[0]), float(pt[1])), self.coordinate(pt))
        return None

    def on_boundary(self, p, tol: float = 1e-10) -> bool:
        d = math.hypot(p[0] - self.center[0], p[1] - self.center[1])
        return abs(d - self.radius) <= tol * max(1.0, self.radius)

    @property
    def perimeter(self) -> float:
        return 2 * math.pi * self.radius

    def coordinate(self, point, side: int = 0) -> float:
        ang = math.atan2(point[1] - self.center[1], point[0] - self.center[0])
        return (ang % (2 * math.pi)) * self.radius

    def boundary_polyline(self, n: int = 256) -> np.ndarray:
        th = np.linspace(0, 2 * math.pi, n + 1)
        return np.column_stack(
            [self.center[0] + self.radius * np.cos(th), self.center[1] + self.radius * np.sin(th)]
        )

    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return (cx - r, cy - r, cx + r, cy + r)

    def to_dict(self) -> dict:
        return {"kind": "disc", "center": list(self.center), "radius": self.radius}


def _signed_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _polyline_hits(p, q, poly: np.ndarray, closed: bool):
    """All (t, segment index, u) contacts of p->q with a polyline."""
    n = len(poly)
    nseg = n if closed else n - 1
    hits = []
    for i in range(nseg):
        a = poly[i]
        b = poly[(i + 1) % n]
        for t, u in segment_intersections(p, q, a, b):
            hits.append((t, i, u))
    return hits


def point_on_polyline(pt, poly: np.ndarray, closed: bool, tol: float = 1e-12) -> bool:
    n = len(poly)
    nseg = n if closed else n - 1
    pt = np.asarray(pt, float)
    for i in range(nseg):
        a = poly[i]
        b = poly[(i + 1) % n]
        ab = b - a
        L2 = float(ab @ ab)
        u = 0.0 if L2 == 0 else min(max(float((pt - a) @ ab) / L2, 0.0), 1.0)
        if np.linalg.norm(a + u * ab - pt) <= tol * max(1.0, math.sqrt(L2)):
            return True
    return False


@dataclass(frozen=True, eq=False)
class Polygon(Shape):
    vertices: tuple = ()
    _pts: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.vertices, dtype=float)
        if pts.ndim != 2 or len(pts) < 3:
            raise ValueError("polygon needs at least three vertices")
        area = _signed_area(pts)
        if abs(area) < EPS:
            raise ValueError("degenerate polygon")
        if area < 0:
            pts = pts[::-1].copy()
        n = len(pts)
        for i in range(n):
            for j in range(i + 1, n):
                if j == i + 1 or (i == 0 and j == n - 1):
                    continue
                if segment_intersections(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                    raise ValueError("polygon is not simple")
        seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
        object.__setattr__(self, "_pts", pts)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))

    def contains(self, p) -> bool:
        pts = self._pts
        if point_on_polyline(p, pts, closed=True, tol=1e-10):
            return False
        x, y = p
        inside = False
        n = len(pts)
        for i in range(n):
            x1, y1 = pts[i]
            x2, y2 = pts[(i + 1) % n]
            if (y1 > y) != (y2 > y):
                xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
                if xi > x:
                    inside = not inside
        return inside

    def first_hit(self, p, q):
        hits = _polyline_hits(p, q, self._pts, closed=True)
        if not hits:
            return None
        t, i, u = min(hits)
        pt = np.asarray(p, float) + t * (np.asarray(q, float) - np.asarray(p, float))
        coord = self._cum[i] + u * (self._cum[i + 1] - self._cum[i])
        return BoundaryHit(t, (float(pt[0]), float(pt[1])), float(coord) % self.perimeter)

    @property
    def perimeter(self) -> float:
        return float(self._cum[-1])

    def coordinate(self, point, side: int = 0) -> float:
        pts = self._pts
        n = len(pts)
        best = (math.inf, 0.0)
        pt = np.asarray(point, float)
        for i in range(n):
            a, b = pts[i], pts[(i + 1) % n]
            ab = b - a
            L2 = float(ab @ ab)
            u = min(max(float((pt - a) @ ab) / L2, 0.0), 1.0)
            d = float(np.linalg.norm(a + u * ab - pt))
            if d < best[0]:
                best = (d, self._cum[i] + u * (self._cum[i + 1] - self._cum[i]))
        return float(best[1]) % self.perimeter

    def boundary_polyline(self, n: int = 256) -> np.ndarray:
        return np.vstack([self._pts, self._pts[:1]])

    def bbox(self):
        lo = self._pts.min(axis=0)
        hi = self._pts.max(axis=0)
        return (lo[0], lo[1], hi[0], hi[1])

    def to_dict(self) -> dict:
        return {"kind": "polygon", "vertices": [list(map(float, v)) for v in self.vertices]}


def Rectangle(x0: float, y0: float, x1: float, y1: float) -> Polygon:
    if not (x1 > x0 and y1 > y0):
        raise ValueError("degenerate rectangle")
    return Polygon(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


@dataclass(frozen=True, eq=False)
class Slit(Shape):
    """Base shape with a polyline removed.

    The slit is traversed out along one side (side=+1, to the left of the
    slit direction) and back along the other (side=-1), so a single point of
    the slit carries two boundary coordinates.
    """

    base: Shape = None
    slit: tuple = ()
    _pts: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)
    _foot: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.slit, dtype=float)
        if pts.ndim != 2 or len(pts) < 2:
            raise ValueError("slit needs at least two points")
        bx0, by0, bx1, by1 = self.base.bbox()
        for p in pts:
            if not (self.base.contains(p) or point_on_polyline(p, self.base.boundary_polyline(2048), True, 1e-6)):
                raise ValueError("slit must lie in the closure of the base shape")
        seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        object.__setattr__(self, "_pts", pts)
        object.__setattr__(self, "_cum", np.concatenate([[0.0], np.cumsum(seg)]))
        object.__setattr__(self, "_foot", self.base.coordinate(pts[0]))

    @property
    def slit_length(self) -> float:
        return float(self._cum[-1])

    def contains(self, p) -> bool:
        return self.base.contains(p) and not point_on_polyline(p, self._pts, closed=False, tol=1e-10)

    def _slit_coord(self, s: float, side: int) -> float:
        L = self.slit_length
        off = s if side >= 0 else 2 * L - s
        return self._foot + off

    def _shift(self, c: float) -> float:
        # base coordinates past the slit foot move by the slit round trip
        return c + 2 * self.slit_length if c > self._foot else c

    def first_hit(self, p, q):
        best = None
        bh = self.base.first_hit(p, q)
        if bh is not None:
            best = BoundaryHit(bh.t, bh.point, self._shift(bh.coord))
        p = np.asarray(p, float)
        q = np.asarray(q, float)
        for t, i, u in _polyline_hits(p, q, self._pts, closed=False):
            if best is not None and t >= best.t:
                continue
            a, b = self._pts[i], self._pts[i + 1]
            approach = p if t > 0 else q
            side = 1 if cross(b - a, approach - a) >= 0 else -1
            if t == 0 and cross(b - a, q - a) == 0:
                side = 1
            s = self._cum[i] + u * (self._cum[i + 1] - self._cum[i])
            pt = p + t * (q - p)
            best = BoundaryHit(t, (float(pt[0]), float(pt[1])), self._slit_coord(s, side), side)
        return best

    @property
    def perimeter(self) -> float:
        return self.base.perimeter + 2 * self.slit_length

    def coordinate(self, point, side: int = 0) -> float:
        if side != 0 and point_on_polyline(point, self._pts, closed=False, tol=1e-9):
            pt = np.asarray(point, float)
            best = (math.inf, 0.0)
            for i in range(len(self._pts) - 1):
                a, b = self._pts[i], self._pts[i + 1]
                ab = b - a
                u = min(max(float((pt - a) @ ab) / float(ab @ ab), 0.0), 1.0)
                d = float(np.linalg.norm(a + u * ab - pt))
                if d < best[0]:
                    best = (d, self._cum[i] + u * (self._cum[i + 1] - self._cum[i]))
            return self._slit_coord(best[1], side)
        return self._shift(self.base.coordinate(point))

    def boundary_polyline(self, n: int = 256) -> np.ndarray:
        return self.base.boundary_polyline(n)

    def bbox(self):
        return self.base.bbox()

    def to_dict(self) -> dict:
        return {"kind": "slit", "base": self.base.to_dict(), "slit": [list(map(float, p)) for p in self.slit]}


@dataclass(frozen=True, eq=False)
class Difference(Shape):
    base: Shape = None
    holes: tuple = ()
    simply_connected = False

    def contains(self, p) -> bool:
        if not self.base.contains(p):
            return False
        for h in self.holes:
            if h.contains(p) or h.on_boundary(p):
                return False
        return True

    def first_hit(self, p, q):
        best = self.base.first_hit(p, q)
        offset = self.base.perimeter
        for h in self.holes:
            hh = h.first_hit(p, q)
            if hh is not None and (best is None or hh.t < best.t):
                best = BoundaryHit(hh.t, hh.point, offset + hh.coord, hh.side)
            offset += h.perimeter
        return best

    @property
    def perimeter(self) -> float:
        return self.base.perimeter + sum(h.perimeter for h in self.holes)

    def coordinate(self, point, side: int = 0) -> float:
        return self.base.coordinate(point, side)

    def boundary_polyline(self, n: int = 256) -> np.ndarray:
        return self.base.boundary_polyline(n)

    def bbox(self):
        return self.base.bbox()

    def to_dict(self) -> dict:
        return {"kind": "difference", "base": self.base.to_dict(), "holes": [h.to_dict() for h in self.holes]}


def shape_from_dict(d: dict) -> Shape:
    kind = d["kind"]
    if kind == "disc":
        return Disc(tuple(d.get("center", (0.0, 0.0))), float(d["radius"]))
    if kind == "rectangle":
        return Rectangle(*map(float, d["box"]))
    if kind == "polygon":
        return Polygon(tuple(map(tuple, d["vertices"])))
    if kind == "slit":
        return Slit(shape_from_dict(d["base"]), tuple(map(tuple, d["slit"])))
    if kind == "difference":
        return Difference(shape_from_dict(d["base"]), tuple(shape_from_dict(h) for h in d["holes"]))
    raise ValueError(f"unknown shape kind {kind!r}")


# --- winding ---------------------------------------------------------------


def _wrap(a):
    return (a + math.pi) % (2 * math.pi) - math.pi


def winding_around(polyline, z) -> float:
    """Continuous change of arg(gamma - z) along a polyline."""
    pts = _as_points(polyline) - np.asarray(z, float)
    if np.any(np.hypot(pts[:, 0], pts[:, 1]) < 1e-14):
        raise ValueError("reference point lies on the curve")
    for a, b in zip(pts[:-1], pts[1:]):
        # the segment must not pass through the origin
        if abs(cross(a, b)) < 1e-14 and float(a @ b) < 0:
            raise ValueError("reference point lies on the curve")
    ang = np.arctan2(pts[:, 1], pts[:, 0])
    return float(np.sum(_wrap(np.diff(ang))))


def turning_angle(polyline) -> float:
    """Sum of exterior turning angles between consecutive segments."""
    pts = _as_points(polyline)
    d = np.diff(pts, axis=0)
    keep = np.hypot(d[:, 0], d[:, 1]) > 0
    d = d[keep]
    if len(d) < 2:
        return 0.0
    ang = np.arctan2(d[:, 1], d[:, 0])
    turns = _wrap(np.diff(ang))
    if np.any(np.abs(np.abs(turns) - math.pi) < 1e-12):
        raise ValueError("polyline backtracks; turning angle undefined")
    return float(np.sum(turns))


def winding_from_start(polyline) -> float:
    """W(gamma, gamma(0)): winding of the curve seen from its own start point."""
    pts = _as_points(polyline)
    z = pts[0]
    rest = pts[1:]
    d = rest - z
    r = np.hypot(d[:, 0], d[:, 1])
    if np.any(r < 1e-14):
        raise ValueError("curve returns to its start point")
    ang = np.arctan2(d[:, 1], d[:, 0])
    return float(np.sum(_wrap(np.diff(ang))))


# --- curve distances -------------------------------------------------------


def discrete_frechet(P, Q) -> float:
    """Discrete Frechet distance between two vertex sequences."""
    return float(frechet_prefixes(P, Q)[-1])


def frechet_prefixes(P, Q) -> np.ndarray:
    """Discrete Frechet distance of each prefix of P against the whole of Q."""
    from ._kernels import frechet_prefix

    P = np.ascontiguousarray(_as_points(P), dtype=float)
    Q = np.ascontiguousarray(_as_points(Q), dtype=float)
    return frechet_prefix(P, Q)


def densify(polyline, step: float) -> np.ndarray:
    """Insert points so that consecutive points are at most `step` apart."""
    pts = _as_points(polyline)
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        k = max(1, int(math.ceil(np.linalg.norm(b - a) / step)))
        for j in range(1, k + 1):
            out.append(a + (b - a) * j / k)
    return np.asarray(out)


def point_to_polyline_distance(points, polyline) -> np.ndarray:
    """Distance from each point to a polyline (segments, not just vertices)."""
    P = _as_points(points)
    L = _as_points(polyline)
    if len(L) == 1:
        return np.hypot(*(P - L[0]).T)
    A = L[:-1]
    B = L[1:]
    AB = B - A
    L2 = (AB**2).sum(axis=1)
    L2[L2 == 0] = 1.0
    AP = P[:, None, :] - A[None, :, :]
    u = np.clip((AP * AB[None]).sum(axis=2) / L2[None], 0.0, 1.0)
    proj = A[None] + u[..., None] * AB[None]
    d = np.sqrt(((P[:, None, :] - proj) ** 2).sum(axis=2))
    return d.min(axis=1)


def hausdorff(P, Q) -> float:
    P = _as_points(P)
    Q = _as_points(Q)
    return float(max(point_to_polyline_distance(P, Q).max(), point_to_polyline_distance(Q, P).max()))


def diameter(points) -> float:
    P = _as_points(points)
    if len(P) < 2:
        return 0.0
    if len(P) > 2000:
        from scipy.spatial import ConvexHull

        try:
            P = P[ConvexHull(P).vertices]
        except Exception:
            pass
    d = np.sqrt(((P[:, None, :] - P[None, :, :]) ** 2).sum(axis=2))
    return float(d.max())
