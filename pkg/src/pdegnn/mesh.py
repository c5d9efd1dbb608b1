"""Unstructured meshes over 2-D domains and their neighbour graphs.

Points are sampled uniformly inside a domain, boundary nodes are laid out
deterministically along each boundary segment, and connectivity comes from
a Delaunay triangulation. Periodic squares are handled by triangulating a
3x3 tiling of the point cloud and folding wrapped edges back onto the
original nodes with a lattice shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

BOUNDARY_TOL = 1e-9


@dataclass(frozen=True)
class Segment:
    """Parametric boundary piece ``p(t) = start + t (end - start) + sin(pi t) bulge``."""

    name: str
    start: tuple[float, float]
    end: tuple[float, float]
    bulge: tuple[float, float] = (0.0, 0.0)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        a = np.asarray(self.start, dtype=float)
        b = np.asarray(self.end, dtype=float)
        return a + t * (b - a) + np.sin(np.pi * t) * np.asarray(self.bulge, dtype=float)

    @property
    def straight(self) -> bool:
        return self.bulge == (0.0, 0.0)

    def polyline(self, n: int = 256) -> np.ndarray:
        if self.straight:
            n = 1
        return self(np.linspace(0.0, 1.0, n + 1))

    def length(self) -> float:
        p = self.polyline()
        return float(np.sum(np.hypot(*np.diff(p, axis=0).T)))

    def arclength_points(self, k: int) -> np.ndarray:
        """``k`` points at equal arclength from the start, excluding the end."""
        if self.straight:
            return self(np.arange(k) / k)
        dense_t = np.linspace(0.0, 1.0, 4097)
        p = self(dense_t)
        s = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(p, axis=0).T))])
        targets = s[-1] * np.arange(k) / k
        return self(np.interp(targets, s, dense_t))


@dataclass(frozen=True)
class Domain:
    kind: str  # "unit_square" | "periodic_square" | "distorted"
    segments: tuple[Segment, ...] = ()
    side: float = 1.0
    params: dict = field(default_factory=dict, compare=False)

    @property
    def periodic(self) -> bool:
        return self.kind == "periodic_square"

    def boundary_polygon(self) -> np.ndarray:
        if self.periodic:
            L = self.side
            return np.array([[0, 0], [L, 0], [L, L], [0, L]], dtype=float)
        return np.concatenate([s.polyline()[:-1] for s in self.segments])

    def area(self) -> float:
        x, y = self.boundary_polygon().T
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def diameter(self) -> float:
        p = self.boundary_polygon()
        d = p[:, None, :] - p[None, :, :]
        return float(np.sqrt((d ** 2).sum(-1)).max())

    def contains(self, pts) -> np.ndarray:
        return points_in_polygon(pts, self.boundary_polygon())

    def segment_distance(self, pts) -> dict[str, np.ndarray]:
        """Distance from every point to every named segment."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = {}
        for seg in self.segments:
            if seg.straight:
                out[seg.name] = _point_segment_distance(pts, np.asarray(seg.start, float),
                                                        np.asarray(seg.end, float))
            else:
                out[seg.name] = _curve_distance(seg, pts)
        return out


def _curve_distance(seg: Segment, pts, n: int = 1024, iters: int = 60):
    """Distance to a curved segment: nearest sample, then golden-section search in ``t``."""
    t = np.linspace(0.0, 1.0, n + 1)
    samples = seg(t)
    k = np.argmin(((pts[:, None, :] - samples[None]) ** 2).sum(-1), axis=1)
    lo = t[np.maximum(k - 1, 0)]
    hi = t[np.minimum(k + 1, n)]

    def d2(tt):
        return ((seg(tt) - pts) ** 2).sum(-1)

    r = (np.sqrt(5.0) - 1.0) / 2.0
    for _ in range(iters):
        a = hi - r * (hi - lo)
        b = lo + r * (hi - lo)
        left = d2(a) < d2(b)
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
    return np.sqrt(d2(0.5 * (lo + hi)))


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / float(ab @ ab), 0.0, 1.0)
    return np.hypot(*(p - (a + t[:, None] * ab)).T)


def points_in_polygon(pts, poly) -> np.ndarray:
    """Even-odd crossing test of each point against a closed polygon."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    x, y = pts[:, 0:1], pts[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        straddle = (y0 > y) != (y1 > y)
        xcross = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
        hits = straddle & (x < xcross)
    return (hits.sum(axis=1) % 2).astype(bool)


def unit_square() -> Domain:
    return Domain(
        "unit_square",
        (
            Segment("bottom", (0.0, 0.0), (1.0, 0.0)),
            Segment("right", (1.0, 0.0), (1.0, 1.0)),
            Segment("top", (1.0, 1.0), (0.0, 1.0)),
            Segment("left", (0.0, 1.0), (0.0, 0.0)),
        ),
    )


def periodic_square(side: float = 2 * np.pi) -> Domain:
    return Domain("periodic_square", side=float(side))


DISTORTED_DEFAULTS = dict(bump=0.2, right_shift=0.3, wall_base=0.4, left_shift=-0.2)


def make_distorted_domain(bump: float = 0.2, right_shift: float = 0.3,
                          wall_base: float = 0.4, left_shift: float = -0.2) -> Domain:
    """Five-sided test geometry.

    Walking counter-clockwise: flat ``bottom`` from (0,0) to (1,0); inclined
    ``right`` edge up to (1+right_shift, wall_base); vertical ``wall`` up to
    height 1; ``top`` edge back to (left_shift, 1) carrying a sinusoidal bump
    of height ``bump``; inclined ``left`` edge down to the origin. With all
    parameters zero the domain is the unit square.

    Documented ranges: ``bump`` in [-0.4, 0.4], ``right_shift`` and
    ``left_shift`` in [-0.45, 0.45], ``wall_base`` in [0.05, 0.95].
    """
    checks = [
        (-0.4 <= bump <= 0.4, "bump"),
        (-0.45 <= right_shift <= 0.45, "right_shift"),
        (-0.45 <= left_shift <= 0.45, "left_shift"),
        (0.05 <= wall_base <= 0.95, "wall_base"),
    ]
    for ok, name in checks:
        if not ok:
            raise ValueError(f"distorted domain parameter {name} out of range")
    xr = 1.0 + right_shift
    segs = (
        Segment("bottom", (0.0, 0.0), (1.0, 0.0)),
        Segment("right", (1.0, 0.0), (xr, wall_base)),
        Segment("wall", (xr, wall_base), (xr, 1.0)),
        Segment("top", (xr, 1.0), (left_shift, 1.0), (0.0, bump)),
        Segment("left", (left_shift, 1.0), (0.0, 0.0)),
    )
    dom = Domain("distorted", segs, params=dict(bump=bump, right_shift=right_shift,
                                                wall_base=wall_base, left_shift=left_shift))
    if not is_simple_loop(dom):
        raise ValueError("distorted domain parameters give a self-intersecting boundary")
    return dom


def check_closed(domain: Domain, tol: float = 1e-12) -> None:
    segs = domain.segments
    if not segs:
        raise ValueError("domain has no boundary segments")
    for a, b in zip(segs, segs[1:] + segs[:1]):
        if np.hypot(*(np.subtract(a.end, b.start))) > tol:
            raise ValueError(f"boundary is open between segments {a.name!r} and {b.name!r}")


def _segments_cross(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    d1, d2 = orient(q1, q2, p1), orient(q1, q2, p2)
    d3, d4 = orient(p1, p2, q1), orient(p1, p2, q2)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple_loop(domain: Domain, n: int = 64) -> bool:
    """Brute-force check that no two non-adjacent boundary pieces intersect."""
    check_closed(domain)
    pieces = []
    for seg in domain.segments:
        p = seg.polyline(n)
        pieces.extend(zip(p[:-1], p[1:]))
    m = len(pieces)
    for i in range(m):
        for j in range(i + 2, m):
            if i == 0 and j == m - 1:
                continue
            if _segments_cross(*pieces[i], *pieces[j]):
                return False
    return True


@dataclass
class PointSet:
    positions: np.ndarray
    on_boundary: np.ndarray
    domain: Domain | None = None


def sample_points(domain: Domain, n_points: int, seed: int,
                  include_boundary: bool = True) -> PointSet:
    """Uniform interior points plus evenly spaced boundary nodes.

    Boundary nodes sit on every segment at a spacing close to
    ``sqrt(area / n_points)``; corners are always included.
    """
    if n_points < 0:
        raise ValueError("n_points must be non-negative")
    rng = np.random.default_rng(seed)
    if domain.periodic:
        L = domain.side
        pts = rng.uniform(0.0, L, size=(n_points, 2))
        return PointSet(pts, np.zeros(n_points, dtype=bool), domain)

    check_closed(domain)
    area = domain.area()
    spacing = np.sqrt(area / n_points) if n_points > 0 else np.inf
    bnd = []
    if include_boundary:
        for seg in domain.segments:
            k = max(1, int(round(seg.length() / spacing))) if np.isfinite(spacing) else 1
            bnd.append(seg.arclength_points(k))
    bnd = np.concatenate(bnd) if bnd else np.zeros((0, 2))

    poly = domain.boundary_polygon()
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    diam = domain.diameter()
    interior = []
    count = 0
    while count < n_points:
        cand = rng.uniform(lo, hi, size=(max(64, 2 * (n_points - count)), 2))
        keep = domain.contains(cand)
        cand = cand[keep]
        if len(cand):
            dist = np.min(np.stack(list(domain.segment_distance(cand).values())), axis=0)
            cand = cand[dist > BOUNDARY_TOL * diam]
        interior.append(cand[: n_points - count])
        count += len(interior[-1])
    interior = np.concatenate(interior) if interior else np.zeros((0, 2))
    pts = np.concatenate([bnd, interior])
    flags = np.zeros(len(pts), dtype=bool)
    flags[: len(bnd)] = True
    return PointSet(pts, flags, domain)


@dataclass
class Graph:
    """Mesh graph: node positions, boundary flags, directed edges, triangles.

    ``shifts[e]`` is the lattice correction so that the displacement of edge
    ``(i, j)`` is ``positions[j] + shifts[e] - positions[i]``.
    """

    positions: np.ndarray
    flags: np.ndarray
    edges: np.ndarray
    shifts: np.ndarray
    triangles: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.positions)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def displacements(self) -> np.ndarray:
        return self.positions[self.edges[:, 1]] + self.shifts - self.positions[self.edges[:, 0]]

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_nodes)

    def violations(self) -> list[str]:
        """Structural invariant violations; empty when the graph is well formed."""
        out = []
        e, s = self.edges, self.shifts
        if len(e) and (e.min() < 0 or e.max() >= self.n_nodes):
            out.append("edge index out of range")
            return out
        if np.any(e[:, 0] == e[:, 1]):
            out.append("self-loop present")
        keys = {(int(i), int(j)) for i, j in e}
        if len(keys) != len(e):
            out.append("duplicate edge present")
        lookup = {(int(i), int(j)): k for k, (i, j) in enumerate(e)}
        for k, (i, j) in enumerate(e):
            back = lookup.get((int(j), int(i)))
            if back is None:
                out.append(f"asymmetric edge ({i}, {j}) has no reverse")
                break
            if not np.allclose(s[back], -s[k], atol=1e-12):
                out.append(f"edge ({i}, {j}) shift not antisymmetric")
                break
        if not np.all(np.isin(self.flags, (0, 1))):
            out.append("boundary flag outside {0, 1}")
        return out


def _normalize_points(points) -> tuple[np.ndarray, np.ndarray | None, Domain | None]:
    if isinstance(points, PointSet):
        return np.asarray(points.positions, float), points.on_boundary, points.domain
    return np.asarray(points, dtype=float), None, None


def _check_degenerate(pts: np.ndarray) -> None:
    if len(pts) < 3:
        raise ValueError("degenerate point set")
    centred = pts - pts.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise ValueError("degenerate point set")


def edges_from_triangles(tri: np.ndarray) -> np.ndarray:
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    return np.unique(e, axis=0)


TIE_SHEAR = 1e-10


def _delaunay_triangles(pts: np.ndarray) -> np.ndarray:
    # A tiny shear x += eps * y resolves exactly cocircular ties (regular
    # grids, evenly spaced boundary nodes) the same way everywhere, so a
    # translated lattice keeps a translated triangulation.
    sheared = pts.copy()
    sheared[:, 0] += TIE_SHEAR * (pts[:, 1] - pts[:, 1].min())
    tri = Delaunay(sheared).simplices.astype(np.int64)
    p = pts[tri]
    area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
             - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    scale = np.ptp(pts, axis=0).max() ** 2
    keep = np.abs(area2) > 1e-13 * scale
    tri = tri[keep]
    # counter-clockwise orientation
    flip = area2[keep] < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    return tri


def triangulate(points) -> Graph:
    """Delaunay graph of a point set.

    Accepts a raw ``(N, 2)`` array or a :class:`PointSet`. For point sets
    tied to a domain, triangles whose centroid falls outside it are dropped
    and boundary flags come from the sampler.
    """
    pts, on_bnd, domain = _normalize_points(points)
    _check_degenerate(pts)
    tri = _delaunay_triangles(pts)
    if domain is not None and not domain.periodic:
        cent = pts[tri].mean(axis=1)
        tri = tri[domain.contains(cent)]
    flags = np.zeros(len(pts), dtype=np.uint8) if on_bnd is None else on_bnd.astype(np.uint8)
    edges = edges_from_triangles(tri)
    return Graph(pts.copy(), flags, edges, np.zeros((len(edges), 2)), tri)


def build_mesh(domain: Domain, n_points: int, seed: int) -> Graph:
    """Sample and triangulate; periodic squares are stitched."""
    g = triangulate(sample_points(domain, n_points, seed))
    if domain.periodic:
        g = stitch_periodic(g, domain)
    return g


def _dedupe_edges(edges: np.ndarray, shifts: np.ndarray, pos: np.ndarray):
    """One edge per ordered node pair, keeping the shortest wrapped displacement."""
    disp = pos[edges[:, 1]] + shifts - pos[edges[:, 0]]
    length = np.hypot(*disp.T)
    order = np.lexsort((shifts[:, 1], shifts[:, 0], length, edges[:, 1], edges[:, 0]))
    edges, shifts = edges[order], shifts[order]
    first = np.ones(len(edges), dtype=bool)
    first[1:] = np.any(edges[1:] != edges[:-1], axis=1)
    return edges[first], shifts[first]


def stitch_periodic(graph: Graph, domain: Domain) -> Graph:
    """Wrap a triangulation of points inside one period cell onto a torus."""
    if not domain.periodic:
        raise ValueError("stitch_periodic requires a periodic domain")
    L = domain.side
    pos = graph.positions
    n = len(pos)
    if np.any(pos < 0) or np.any(pos >= L):
        raise ValueError("periodic points must lie inside [0, side)^2")
    offsets = np.array([(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)], dtype=float)
    centre = 4  # index of (0, 0)
    tiled = np.concatenate([pos + L * o for o in offsets])
    tri = _delaunay_triangles(tiled)
    copy, orig = tri // n, tri % n
    touching = np.any(copy == centre, axis=1)
    copy, orig = copy[touching], orig[touching]

    # canonical representative: the copy whose lowest-index vertex is central
    rel = offsets[copy]  # (T, 3, 2)
    ref = np.argmin(orig, axis=1)
    rel = rel - rel[np.arange(len(rel)), ref][:, None, :]
    keys = {}
    for t in range(len(orig)):
        key = tuple(sorted(zip(orig[t].tolist(), rel[t, :, 0].tolist(), rel[t, :, 1].tolist())))
        keys.setdefault(key, t)
    kept = np.array(sorted(keys.values()), dtype=np.int64)
    orig, rel = orig[kept], rel[kept]

    edges, shifts = [], []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        edges.append(orig[:, [a, b]])
        shifts.append(L * (rel[:, b] - rel[:, a]))
    edges = np.concatenate(edges)
    shifts = np.concatenate(shifts)
    edges = np.concatenate([edges, edges[:, ::-1]])
    shifts = np.concatenate([shifts, -shifts])
    edges, shifts = _dedupe_edges(edges, shifts, pos)
    return Graph(pos.copy(), np.zeros(n, dtype=np.uint8), edges, shifts, orig)


def merge_periodic_x(graph: Graph, period: float = 1.0, tol: float = 1e-9):
    """Identify nodes on ``x = period`` with their partners on ``x = 0``.

    Returns ``(graph, keep, node_map)``: the merged graph on the kept nodes,
    the original indices of those nodes, and the map from every original node
    to its merged index. Flags on the identified faces are cleared except
    where a node also lies on ``y = 0`` or ``y = 1``.
    """
    pos = graph.positions
    n = len(pos)
    right = np.flatnonzero(np.abs(pos[:, 0] - period) <= tol)
    left = np.flatnonzero(np.abs(pos[:, 0]) <= tol)
    partner = np.arange(n)
    for r in right:
        d = np.abs(pos[left, 1] - pos[r, 1])
        k = int(np.argmin(d)) if len(left) else -1
        if k < 0 or d[k] > tol:
            raise ValueError(f"node {r} on x={period} has no partner on x=0")
        partner[r] = left[k]
    keep = np.setdiff1d(np.arange(n), right)
    new_index = np.full(n, -1, dtype=np.int64)
    new_index[keep] = np.arange(len(keep))
    node_map = new_index[partner]

    tri = graph.triangles
    tri_shift = np.zeros(tri.shape + (2,))
    tri_shift[..., 0] = np.where(np.isin(tri, right), period, 0.0)
    mtri = node_map[tri]
    edges, shifts = [], []
    for a, b in ((0, 1), (1, 2), (2, 0)):
        edges.append(mtri[:, [a, b]])
        shifts.append(tri_shift[:, b] - tri_shift[:, a])
    edges = np.concatenate(edges)
    shifts = np.concatenate(shifts)
    edges = np.concatenate([edges, edges[:, ::-1]])
    shifts = np.concatenate([shifts, -shifts])
    ok = edges[:, 0] != edges[:, 1]
    new_pos = pos[keep]
    edges, shifts = _dedupe_edges(edges[ok], shifts[ok], new_pos)

    flags = graph.flags[keep].copy()
    y = new_pos[:, 1]
    on_y_face = (np.abs(y) <= tol) | (np.abs(y - 1.0) <= tol)
    on_x_face = np.abs(new_pos[:, 0]) <= tol
    flags[on_x_face & ~on_y_face] = 0
    return Graph(new_pos.copy(), flags, edges, shifts, mtri), keep, node_map


def mean_edge_length(graph: Graph) -> float:
    if graph.n_edges == 0:
        raise ValueError("graph has no edges")
    return float(np.mean(np.hypot(*graph.displacements().T)))


def points_for_edge_length(domain: Domain, target: float, seed: int = 0) -> int:
    """Interior point count whose mesh has mean edge length close to ``target``."""
    area = domain.area()
    n = max(4, int(round(area / target ** 2)))
    for _ in range(8):
        h = mean_edge_length(build_mesh(domain, n, seed))
        n = max(4, int(round(n * (h / target) ** 2)))
    return n
