"""Small planar-geometry helpers shared by the geometry and meshing layers."""

from __future__ import annotations

import numpy as np


def polygon_signed_area(poly):
    """Signed area of a closed polygon given as (n, 2) vertices (no repeat)."""
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def points_in_polygon(pts, poly):
    """Vectorized even-odd test; points exactly on edges are not guaranteed."""
    pts = np.atleast_2d(pts)
    x, y = pts[:, 0], pts[:, 1]
    xa, ya = poly[:, 0], poly[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    inside = np.zeros(len(pts), dtype=bool)
    for i in range(len(poly)):
        cond = (ya[i] > y) != (yb[i] > y)
        if not cond.any():
            continue
        xs = xa[i] + (y - ya[i]) * (xb[i] - xa[i]) / (yb[i] - ya[i])
        inside ^= cond & (x < xs)
    return inside


def segments_intersect(p0, p1, q0, q1, eps=0.0):
    """True if open segments [p0,p1] and [q0,q1] properly intersect."""
    d1 = np.cross(p1 - p0, q0 - p0)
    d2 = np.cross(p1 - p0, q1 - p0)
    d3 = np.cross(q1 - q0, p0 - q0)
    d4 = np.cross(q1 - q0, p1 - q0)
    return ((d1 > eps) != (d2 > eps)) and ((d3 > eps) != (d4 > eps)) and \
        not (abs(d1) <= eps and abs(d2) <= eps)


def polyline_self_intersects(poly, closed=True):
    """Brute-force proper self-intersection test with a bbox prefilter."""
    n = len(poly)
    segs = [(poly[i], poly[(i + 1) % n]) for i in range(n if closed else n - 1)]
    m = len(segs)
    lo = np.array([np.minimum(a, b) for a, b in segs])
    hi = np.array([np.maximum(a, b) for a, b in segs])
    for i in range(m):
        for j in range(i + 2, m):
            if closed and i == 0 and j == m - 1:
                continue
            if (lo[i] > hi[j]).any() or (lo[j] > hi[i]).any():
                continue
            if segments_intersect(*segs[i], *segs[j]):
                return True
    return False


def point_segment_distance(pts, a, b):
    """Distances from points (m, 2) to segment [a, b], plus the parameters."""
    pts = np.atleast_2d(pts)
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        t = np.zeros(len(pts))
    else:
        t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1), t


def nearest_on_polyline(pt, poly, closed=True):
    """Nearest point on a polyline: (distance, edge index, edge parameter)."""
    n = len(poly)
    m = n if closed else n - 1
    best = (np.inf, -1, 0.0)
    p = np.asarray(pt, dtype=float)[None, :]
    for i in range(m):
        a = poly[i]
        b = poly[(i + 1) % n]
        d, t = point_segment_distance(p, a, b)
        if d[0] < best[0]:
            best = (d[0], i, float(t[0]))
    return best


def polyline_lengths(poly, closed=False):
    seg = np.diff(poly, axis=0)
    if closed:
        seg = np.vstack([seg, poly[0] - poly[-1]])
    return np.linalg.norm(seg, axis=1)


def polyline_min_distance(pa, pb, closed_a=True, closed_b=True):
    """Minimum distance between two polylines (vertex/segment sampling)."""
    best = np.inf
    nb = len(pb)
    mb = nb if closed_b else nb - 1
    for i in range(mb):
        d, _ = point_segment_distance(pa, pb[i], pb[(i + 1) % nb])
        best = min(best, d.min())
    na = len(pa)
    ma = na if closed_a else na - 1
    for i in range(ma):
        d, _ = point_segment_distance(pb, pa[i], pa[(i + 1) % na])
        best = min(best, d.min())
    return best
