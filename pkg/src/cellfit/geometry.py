"""Discrete geometry of closed polygonal curves in the plane.

Vertices are stored as ``(N, 2)`` float arrays, ordered counter-clockwise so
that the outward normal points away from the enclosed region.  Vertex ``i``
is joined to vertex ``(i + 1) % N``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "Curve",
    "as_vertices",
    "closest_points",
    "closest_point_on_curve",
    "contains",
    "discrete_curvature_vector",
    "edge_lengths",
    "enclosed_area",
    "grid_band_distance",
    "grid_inside",
    "hausdorff_point_distance",
    "is_simple",
    "mean_curvature",
    "signed_area",
    "signed_distance",
    "vertex_curvature",
    "vertex_normals",
]

DEGENERATE_EDGE_RTOL = 1e-14
# above this many point pairs the nearest-neighbour search switches to a k-d tree
_BRUTE_FORCE_PAIRS = 4_000_000


class Curve:
    """Closed, counter-clockwise, simple polygon.

    Instances are immutable: the vertex array is copied and flagged read-only.

    Parameters
    ----------
    vertices : array_like, shape (N, 2)
    check_simple : bool
        Run the O(N^2) self-intersection test.  The forward solver skips it
        for per-step states unless configured otherwise.
    """

    __slots__ = ("_vertices",)

    def __init__(self, vertices, check_simple: bool = True):
        x = np.array(vertices, dtype=float, copy=True)
        if x.ndim != 2 or x.shape[1] != 2:
            raise ValueError(f"vertices must have shape (N, 2), got {x.shape}")
        if x.shape[0] < 3:
            raise ValueError(f"a closed curve needs at least 3 vertices, got {x.shape[0]}")
        if not np.all(np.isfinite(x)):
            raise ValueError("vertices contain non-finite values")
        _check_edges(x)
        if signed_area(x) <= 0.0:
            raise ValueError("curve must be counter-clockwise (positive signed area)")
        if check_simple and not is_simple(x):
            raise ValueError("curve is self-intersecting")
        x.flags.writeable = False
        self._vertices = x

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    @property
    def n_vertices(self) -> int:
        return self._vertices.shape[0]

    def __len__(self) -> int:
        return self._vertices.shape[0]

    def __repr__(self) -> str:
        return f"Curve(n_vertices={self.n_vertices}, area={enclosed_area(self):.6g})"


def as_vertices(curve) -> np.ndarray:
    if isinstance(curve, Curve):
        return curve.vertices
    return np.asarray(curve, dtype=float)


def _check_edges(x: np.ndarray) -> None:
    lengths = edge_lengths(x)
    diameter = np.ptp(x, axis=0).max()
    if lengths.min() <= DEGENERATE_EDGE_RTOL * max(diameter, np.finfo(float).tiny):
        i = int(lengths.argmin())
        raise ValueError(f"degenerate edge between vertices {i} and {(i + 1) % len(x)}")


def edge_lengths(curve) -> np.ndarray:
    """Length of edge ``i`` joining vertex ``i`` to vertex ``i + 1``."""
    x = as_vertices(curve)
    return np.hypot(*(np.roll(x, -1, axis=0) - x).T)


def signed_area(curve) -> float:
    x = as_vertices(curve)
    xn = np.roll(x, -1, axis=0)
    return 0.5 * float(np.sum(x[:, 0] * xn[:, 1] - xn[:, 0] * x[:, 1]))


def enclosed_area(curve) -> float:
    """Shoelace area, always non-negative."""
    return abs(signed_area(curve))


def vertex_curvature(x_prev, x, x_next) -> np.ndarray:
    """Lumped piecewise-linear Laplace-Beltrami of the position at ``x``.

    Works for a single stencil or stacked stencils (arrays of shape (..., 2)).
    Returns ``-(S x)_i / (M_L)_ii`` which approximates ``-H nu``.
    """
    x_prev, x, x_next = (np.asarray(v, dtype=float) for v in (x_prev, x, x_next))
    lp = np.linalg.norm(x - x_prev, axis=-1)[..., None]
    ln = np.linalg.norm(x_next - x, axis=-1)[..., None]
    if np.any(lp <= 0) or np.any(ln <= 0):
        raise ValueError("degenerate edge in curvature stencil")
    stiff = (x - x_prev) / lp - (x_next - x) / ln
    return -stiff / (0.5 * (lp + ln))


def discrete_curvature_vector(curve) -> np.ndarray:
    """Per-vertex curvature vector, approximately ``-H nu``.

    For a counter-clockwise circle of radius ``r`` the vectors point to the
    centre with magnitude ``1/r``.
    """
    x = as_vertices(curve)
    _check_edges(x)
    return vertex_curvature(np.roll(x, 1, axis=0), x, np.roll(x, -1, axis=0))


def vertex_normals(curve) -> np.ndarray:
    """Outward unit normals at the vertices (rotated central chord)."""
    x = as_vertices(curve)
    chord = np.roll(x, -1, axis=0) - np.roll(x, 1, axis=0)
    n = np.column_stack([chord[:, 1], -chord[:, 0]])
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def mean_curvature(curve) -> np.ndarray:
    """Scalar mean curvature ``H = -kappa . nu``; positive on convex CCW curves."""
    return -np.einsum("ij,ij->i", discrete_curvature_vector(curve), vertex_normals(curve))


def closest_point_on_curve(curve, points):
    """Segment-accurate closest points on the polygon.

    Returns
    -------
    dist : ndarray, shape (M,)
    edge : ndarray of int, shape (M,)
        Index ``i`` of the closest edge ``(i, i + 1)``.
    t : ndarray, shape (M,)
        Position along that edge in ``[0, 1]``.
    """
    x = as_vertices(curve)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a = x
    ab = np.roll(x, -1, axis=0) - x
    ab2 = np.einsum("ij,ij->i", ab, ab)
    m = p.shape[0]
    dist = np.empty(m)
    edge = np.empty(m, dtype=np.intp)
    tpar = np.empty(m)
    chunk = max(1, 2_000_000 // max(len(x), 1))
    for s in range(0, m, chunk):
        q = p[s:s + chunk, None, :]
        t = np.clip(np.einsum("mij,ij->mi", q - a, ab) / ab2, 0.0, 1.0)
        d = np.hypot(*(a + t[..., None] * ab - q).transpose(2, 0, 1))
        k = d.argmin(axis=1)
        rows = np.arange(len(k))
        dist[s:s + chunk] = d[rows, k]
        edge[s:s + chunk] = k
        tpar[s:s + chunk] = t[rows, k]
    return dist, edge, tpar


def contains(curve, points) -> np.ndarray:
    """Even-odd crossing test with half-open edges (ray towards +x)."""
    x = as_vertices(curve)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    a = x[None, :, :]
    b = np.roll(x, -1, axis=0)[None, :, :]
    px = p[:, None, 0]
    py = p[:, None, 1]
    straddle = (a[..., 1] > py) != (b[..., 1] > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = a[..., 0] + (py - a[..., 1]) * (b[..., 0] - a[..., 0]) / (b[..., 1] - a[..., 1])
    crossings = np.count_nonzero(straddle & (xc > px), axis=1)
    return crossings % 2 == 1


def signed_distance(curve, points):
    """Distance to the polygon, negative inside and positive outside.

    Accepts a single point (returns a float) or an array of points.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    dist, _, _ = closest_point_on_curve(curve, p)
    d = np.where(contains(curve, p), -dist, dist)
    return float(d[0]) if single else d


def closest_points(points, queries):
    """Nearest member of ``points`` for every query.

    Returns ``(dist, index)``.  Ties resolve to the lowest index.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    q = np.atleast_2d(np.asarray(queries, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("point set is empty")
    if pts.shape[0] * q.shape[0] > _BRUTE_FORCE_PAIRS:
        from scipy.spatial import cKDTree

        _, idx = cKDTree(pts).query(q)
        idx = np.asarray(idx, dtype=np.intp)
        return np.hypot(*(q - pts[idx]).T), idx
    diff = q[:, None, :] - pts[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    idx = d.argmin(axis=1)
    return d[np.arange(len(idx)), idx], idx


def hausdorff_point_distance(points, x):
    """Distance from ``x`` to the finite set ``points`` and the closest index."""
    d, idx = closest_points(points, np.asarray(x, dtype=float)[None, :])
    return float(d[0]), int(idx[0])


def is_simple(curve) -> bool:
    """True when no two non-adjacent edges intersect."""
    x = as_vertices(curve)
    n = len(x)
    a = x
    b = np.roll(x, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]

    def orient(p, q, r):
        return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])

    o1 = orient(a[i], b[i], a[j])
    o2 = orient(a[i], b[i], b[j])
    o3 = orient(a[j], b[j], a[i])
    o4 = orient(a[j], b[j], b[i])
    proper = (o1 * o2 < 0) & (o3 * o4 < 0)
    return not bool(np.any(proper))


@njit(cache=True)
def _band_kernel(x, x0, y0, h, nx, ny, band, dist, edge, tpar):
    n = x.shape[0]
    for e in range(n):
        ax = x[e, 0]
        ay = x[e, 1]
        bx = x[(e + 1) % n, 0]
        by = x[(e + 1) % n, 1]
        abx = bx - ax
        aby = by - ay
        ab2 = abx * abx + aby * aby
        i0 = max(int(np.floor((min(ax, bx) - band - x0) / h)), 0)
        i1 = min(int(np.ceil((max(ax, bx) + band - x0) / h)), nx - 1)
        j0 = max(int(np.floor((min(ay, by) - band - y0) / h)), 0)
        j1 = min(int(np.ceil((max(ay, by) + band - y0) / h)), ny - 1)
        for j in range(j0, j1 + 1):
            py = y0 + j * h
            for i in range(i0, i1 + 1):
                px = x0 + i * h
                t = ((px - ax) * abx + (py - ay) * aby) / ab2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                dx = ax + t * abx - px
                dy = ay + t * aby - py
                d = np.sqrt(dx * dx + dy * dy)
                if d < dist[j, i]:
                    dist[j, i] = d
                    edge[j, i] = e
                    tpar[j, i] = t


def grid_band_distance(curve, origin, h, shape, band):
    """Unsigned distance on a uniform node grid, resolved within ``band``.

    Only edges whose inflated bounding box covers a node are tested, so nodes
    farther than ``band`` from the curve keep ``inf``.  Inside the band the
    result equals the brute-force minimum over all edges.

    Returns ``(dist, edge, t)`` arrays of shape ``(ny, nx)``.
    """
    x = np.ascontiguousarray(as_vertices(curve), dtype=float)
    ny, nx = shape
    dist = np.full((ny, nx), np.inf)
    edge = np.full((ny, nx), -1, dtype=np.int64)
    tpar = np.zeros((ny, nx))
    _band_kernel(x, float(origin[0]), float(origin[1]), float(h), nx, ny, float(band), dist, edge, tpar)
    return dist, edge, tpar


def grid_inside(curve, xs, ys) -> np.ndarray:
    """Even-odd inside mask on the tensor grid ``xs`` x ``ys`` (shape (ny, nx)).

    Uses the same half-open crossing rule as :func:`contains`, evaluated one
    grid row at a time via cumulative crossing counts.
    """
    x = as_vertices(curve)
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    a = x[None, :, :]
    b = np.roll(x, -1, axis=0)[None, :, :]
    py = ys[:, None]
    straddle = (a[..., 1] > py) != (b[..., 1] > py)
    rows, edges = np.nonzero(straddle)
    ax, ay = x[edges, 0], x[edges, 1]
    bx, by = np.roll(x, -1, axis=0)[edges].T
    xc = ax + (ys[rows] - ay) * (bx - ax) / (by - ay)
    # a crossing counts for node j when xc > xs[j], i.e. for j < first index with xs >= xc
    first = np.searchsorted(xs, xc, side="left")
    toggles = np.zeros((len(ys), len(xs) + 1), dtype=np.int64)
    np.add.at(toggles, (rows, first), 1)
    total = toggles.sum(axis=1, keepdims=True)
    right = total - np.cumsum(toggles, axis=1)[:, : len(xs)]
    return right % 2 == 1
