"""Exact domain descriptions: parametric curve segments, loops, validation.

A domain is the region left of its oriented boundary: the outer loop runs
counterclockwise, holes clockwise. Segments are exact curves; meshing works
on polylines obtained here but keeps (segment, parameter) tags so refinement
can place new nodes back on the true curve.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from ._geomutil import (
    nearest_on_polyline,
    points_in_polygon,
    polygon_signed_area,
    polyline_min_distance,
    polyline_self_intersects,
)


def droplet_radius(t):
    """Radius of the droplet boundary at parameter t in [-1, 1]."""
    t = np.asarray(t, dtype=float)
    even = (45 * t**6 + 75 * t**4 - 525 * t**2 + 469) / 640.0
    odd = (15.0 / 32.0) * t * (t * t - 1) ** 2
    return even + odd


def droplet_radius_prime(t):
    t = np.asarray(t, dtype=float)
    even = (270 * t**5 + 300 * t**3 - 1050 * t) / 640.0
    odd = (15.0 / 32.0) * (t * t - 1) * (5 * t * t - 1)
    return even + odd


@dataclass(frozen=True)
class CurveSegment:
    """One parametric boundary piece.

    kind/params:
      'line':   (x0, y0, x1, y1), trange (0, 1)
      'arc':    (cx, cy, r), trange (angle0, angle1); the parameter is the angle
      'bezier': (x0, y0, ..., x3, y3) four control points, trange (0, 1)
      'polar':  (cx, cy, scale, rot, theta0, theta1, angular, radial)
                radial is ('droplet',) or ('table', t_samples, r_samples);
                angular is 'uniform' or 'cusp' (cosine-smoothed angle with
                stationary endpoints, giving aligned junction tangents)
    flip reverses the traversal without touching params.
    """

    kind: str
    params: tuple
    trange: tuple = (0.0, 1.0)
    flip: bool = False

    def _s(self, t):
        t0, t1 = self.trange
        t = np.asarray(t, dtype=float)
        if np.any(t < t0 - 1e-12) or np.any(t > t1 + 1e-12):
            raise ValueError(f"parameter out of range [{t0}, {t1}]")
        s = (t - t0) / (t1 - t0)
        return 1.0 - s if self.flip else s

    def _radial(self):
        rad = self.params[7]
        if rad[0] == "droplet":
            return droplet_radius, droplet_radius_prime
        ts = np.asarray(rad[1])
        rs = np.asarray(rad[2])
        spl = CubicSpline(ts, rs)
        return spl, spl.derivative()

    def point(self, t):
        s = self._s(t)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        p = self.params
        if self.kind == "line":
            x0, y0, x1, y1 = p
            out = np.column_stack([x0 + s * (x1 - x0), y0 + s * (y1 - y0)])
        elif self.kind == "arc":
            cx, cy, r = p
            a0, a1 = self.trange
            ang = a0 + s * (a1 - a0)
            out = np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])
        elif self.kind == "bezier":
            pts = np.asarray(p, dtype=float).reshape(4, 2)
            u = 1.0 - s
            out = (
                np.outer(u**3, pts[0])
                + np.outer(3 * u * u * s, pts[1])
                + np.outer(3 * u * s * s, pts[2])
                + np.outer(s**3, pts[3])
            )
        elif self.kind == "polar":
            cx, cy, scale, rot, th0, th1, angular, _ = p
            rfun, _ = self._radial()
            t0, t1 = self.trange
            tt = t0 + s * (t1 - t0)
            r = scale * rfun(tt)
            theta = _angle_map(angular, th0, th1, s) + rot
            out = np.column_stack([cx + r * np.cos(theta), cy + r * np.sin(theta)])
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        return out[0] if scalar else out

    def tangent(self, t):
        """Unnormalized d(point)/ds in traversal direction (flip-aware)."""
        s = self._s(t)
        scalar = s.ndim == 0
        s = np.atleast_1d(s)
        p = self.params
        if self.kind == "line":
            x0, y0, x1, y1 = p
            out = np.repeat([[x1 - x0, y1 - y0]], len(s), axis=0)
        elif self.kind == "arc":
            cx, cy, r = p
            a0, a1 = self.trange
            ang, da = a0 + s * (a1 - a0), a1 - a0
            out = np.column_stack([-r * np.sin(ang) * da, r * np.cos(ang) * da])
        elif self.kind == "bezier":
            pts = np.asarray(p, dtype=float).reshape(4, 2)
            u = 1.0 - s
            out = 3 * (
                np.outer(u * u, pts[1] - pts[0])
                + np.outer(2 * u * s, pts[2] - pts[1])
                + np.outer(s * s, pts[3] - pts[2])
            )
        elif self.kind == "polar":
            cx, cy, scale, rot, th0, th1, angular, _ = p
            rfun, rprime = self._radial()
            t0, t1 = self.trange
            tt = t0 + s * (t1 - t0)
            r = scale * rfun(tt)
            dr = scale * rprime(tt) * (t1 - t0)
            theta = _angle_map(angular, th0, th1, s) + rot
            dth = _angle_map_prime(angular, th0, th1, s)
            c, sn = np.cos(theta), np.sin(theta)
            out = np.column_stack([dr * c - r * sn * dth, dr * sn + r * c * dth])
        else:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        if self.flip:
            out = -out
        return out[0] if scalar else out

    def reversed(self):
        return replace(self, flip=not self.flip)

    @property
    def start(self):
        return self.point(self.trange[0])

    @property
    def end(self):
        return self.point(self.trange[1])


def _angle_map(angular, th0, th1, s):
    if angular == "uniform":
        return th0 + s * (th1 - th0)
    if angular == "cusp":
        return th0 + (th1 - th0) * 0.5 * (1.0 - np.cos(np.pi * s))
    raise ValueError(f"unknown angular parametrization {angular!r}")


def _angle_map_prime(angular, th0, th1, s):
    if angular == "uniform":
        return (th1 - th0) * np.ones_like(s)
    return (th1 - th0) * 0.5 * np.pi * np.sin(np.pi * s)


def line(p0, p1):
    return CurveSegment("line", (p0[0], p0[1], p1[0], p1[1]))

def arc(center, r, angle0, angle1):
    return CurveSegment("arc", (center[0], center[1], r), trange=(angle0, angle1))

def bezier(p0, p1, p2, p3):
    flat = tuple(float(c) for p in (p0, p1, p2, p3) for c in p)
    return CurveSegment("bezier", flat)

def polar_graph(center=(0, 0), scale=1.0, rotation=0.0, theta_range=(-np.pi, np.pi),
                radial=("droplet",), angular="uniform", trange=(-1.0, 1.0)):
    params = (center[0], center[1], scale, rotation,
              theta_range[0], theta_range[1], angular, radial)
    return CurveSegment("polar", params, trange=trange)


@dataclass(frozen=True)
class BoundaryLoop:
    """Closed chain of segments; tag is E0 for the outer loop, E1.. for holes."""

    segments: tuple
    tag: str = ""

    def reversed(self):
        return BoundaryLoop(tuple(s.reversed() for s in reversed(self.segments)),
                            tag=self.tag)

    def corner_points(self):
        """(point, turn angle) at each segment junction with a tangent break."""
        out = []
        n = len(self.segments)
        for k in range(n):
            a = self.segments[k]
            b = self.segments[(k + 1) % n]
            ta = a.tangent(a.trange[1])
            tb = b.tangent(b.trange[0])
            na, nb = np.linalg.norm(ta), np.linalg.norm(tb)
            if na == 0 or nb == 0:
                continue
            ta, tb = ta / na, tb / nb
            turn = np.arctan2(np.cross(ta, tb), ta @ tb)
            if abs(turn) > 1e-9:
                out.append((np.asarray(b.point(b.trange[0]), float), float(turn)))
        return out


@dataclass(frozen=True)
class LoopPolyline:
    """Discretized loop: points[i] -> points[i+1 mod n] is edge i, lying on
    segment edge_seg[i] between parameters edge_t0[i] and edge_t1[i]."""

    points: np.ndarray
    edge_seg: np.ndarray
    edge_t0: np.ndarray
    edge_t1: np.ndarray
    tag: str = ""

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class DomainSpec:
    """The domain: outer loop, holes, and optional annotations used downstream."""

    outer: BoundaryLoop
    holes: tuple = ()
    marked_points: Optional[tuple] = None      # 4 boundary points (quadrilateral)
    symmetry_axes: tuple = ()                  # ((point, direction), ...)
    gamma0_hint: Optional[tuple] = None        # start point on the first hole
    name: str = ""
    hints: dict = field(default_factory=dict, compare=False)

    @property
    def n_holes(self):
        return len(self.holes)

    @property
    def loops(self):
        return (self.outer,) + tuple(self.holes)


def evaluate_segment(seg, t):
    """Point on the curve at parameter t (vectorized)."""
    return seg.point(t)


def segment_tangent(seg, t):
    return seg.tangent(t)


def _discretize_segment(seg, tol, max_len):
    """Adaptive parameter breakpoints so chords track the curve within tol."""
    t0, t1 = seg.trange
    if seg.kind == "line":
        ts = [t0, t1]
    else:
        ts = list(np.linspace(t0, t1, 9))
    maxdepth = 40
    out = [ts[0]]
    stack = [(ts[i], ts[i + 1], 0) for i in range(len(ts) - 1)][::-1]
    while stack:
        a, b, depth = stack.pop()
        pa, pb = seg.point(a), seg.point(b)
        tm = 0.5 * (a + b)
        pm = seg.point(tm)
        chordlen = np.linalg.norm(pb - pa)
        dev = np.linalg.norm(pm - 0.5 * (pa + pb))
        need = dev > tol or (max_len is not None and chordlen > max_len)
        if need and depth < maxdepth:
            stack.append((tm, b, depth + 1))
            stack.append((a, tm, depth + 1))
        else:
            out.append(b)
    return np.array(out)


def discretize_loop(loop, tol, max_len=None):
    """Polyline with per-edge (segment, parameter-interval) provenance.

    Max deviation between each chord and the curve is ~tol (adaptive
    bisection on the chord-midpoint distance).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    pts = []
    eseg = []
    et0 = []
    et1 = []
    for k, seg in enumerate(loop.segments):
        ts = _discretize_segment(seg, tol, max_len)
        ps = seg.point(ts)
        if np.any(np.linalg.norm(np.diff(ps, axis=0), axis=1) < 1e-15):
            raise ValueError(f"degenerate segment {k} in loop {loop.tag!r}")
        pts.append(ps[:-1])
        eseg.extend([k] * (len(ts) - 1))
        et0.extend(ts[:-1])
        et1.extend(ts[1:])
    points = np.vstack(pts)
    return LoopPolyline(points, np.array(eseg), np.array(et0), np.array(et1),
                        tag=loop.tag)


def loop_signed_area(loop, tol=None):
    scale = _loop_scale(loop)
    poly = discretize_loop(loop, (tol or 1e-3) * scale)
    return polygon_signed_area(poly.points)


def _loop_scale(loop):
    pts = np.vstack([s.point(np.linspace(*s.trange, 5)) for s in loop.segments])
    return max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-9)


def _closure_errors(loop):
    errs = []
    n = len(loop.segments)
    for k in range(n):
        a = loop.segments[k].end
        b = loop.segments[(k + 1) % n].start
        errs.append(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    return errs


class DomainError(ValueError):
    pass


def validate_domain(spec, tol=None):
    """Check and normalize a DomainSpec.

    Loops must close; orientations are corrected (outer CCW, holes CW);
    holes must lie strictly inside the outer loop, pairwise disjoint, with
    positive clearance. Returns the normalized spec.
    """
    loops = [spec.outer, *spec.holes]
    scale = max(_loop_scale(lp) for lp in loops)
    close_tol = (tol or 1e-9) * scale
    for lp in loops:
        errs = _closure_errors(lp)
        if max(errs) > close_tol:
            raise DomainError(
                f"loop {lp.tag or '?'} is not closed: gap {max(errs):.3e}")

    outer = spec.outer if loop_signed_area(spec.outer) > 0 else spec.outer.reversed()
    holes = tuple(h if loop_signed_area(h) < 0 else h.reversed()
                  for h in spec.holes)
    outer = replace_tag(outer, "E0")
    holes = tuple(replace_tag(h, f"E{i+1}") for i, h in enumerate(holes))

    disc_tol = 2e-3 * scale
    polys = [discretize_loop(lp, disc_tol).points for lp in (outer, *holes)]
    for lp, poly in zip((outer, *holes), polys):
        if polyline_self_intersects(poly):
            raise DomainError(f"loop {lp.tag} self-intersects")
    for i, hp in enumerate(polys[1:], start=1):
        if not points_in_polygon(hp, polys[0]).all():
            raise DomainError(f"hole E{i} is not inside the outer loop")
    for i in range(1, len(polys)):
        for j in range(i + 1, len(polys)):
            if points_in_polygon(polys[i][:1], polys[j]).any() or \
               points_in_polygon(polys[j][:1], polys[i]).any():
                raise DomainError(f"holes E{i} and E{j} overlap")
            if polyline_min_distance(polys[i], polys[j]) <= disc_tol:
                raise DomainError(f"holes E{i} and E{j} touch or overlap")
    for i in range(1, len(polys)):
        if polyline_min_distance(polys[i], polys[0]) <= disc_tol:
            raise DomainError(f"hole E{i} touches the outer loop")

    if spec.marked_points is not None:
        if len(spec.marked_points) != 4:
            raise DomainError("marked_points must list exactly 4 points")
        for p in spec.marked_points:
            d, _, _ = nearest_on_polyline(p, polys[0])
            if d > 10 * disc_tol:
                raise DomainError(f"marked point {p} is not on the outer loop")

    return DomainSpec(outer=outer, holes=holes, marked_points=spec.marked_points,
                      symmetry_axes=spec.symmetry_axes,
                      gamma0_hint=spec.gamma0_hint, name=spec.name,
                      hints=dict(spec.hints))


def replace_tag(loop, tag):
    return BoundaryLoop(loop.segments, tag=tag)


def domain_corner_features(spec):
    """Corners and cusps seen from the domain side.

    Returns a list of dicts {loop, point, domain_angle, kind} where
    domain_angle is the interior angle of the domain at the corner and kind
    is 'corner' or 'cusp' (anti-parallel tangents, angle 2pi).
    """
    feats = []
    for li, lp in enumerate(spec.loops):
        for point, turn in lp.corner_points():
            if abs(abs(turn) - np.pi) < 1e-6:
                feats.append(dict(loop=li, point=point, domain_angle=2 * np.pi,
                                  kind="cusp"))
            else:
                feats.append(dict(loop=li, point=point,
                                  domain_angle=np.pi - turn, kind="corner"))
    return feats


# ---------------------------------------------------------------------------
# shape constructors and builtin domains


class BoundaryProjector:
    """Arclength parameterization of, and nearest-point projection onto,
    every loop of a domain.

    Positions on a loop are arclength fractions in [0, 1) following the
    loop's stored orientation.
    """

    def __init__(self, spec, tol=1e-6):
        from scipy.spatial import cKDTree

        self.spec = spec
        self._pts = []
        self._cum = []
        self._trees = []
        for lp in spec.loops:
            scale = _loop_scale(lp)
            poly = discretize_loop(lp, tol * scale, max_len=0.02 * scale)
            pts = poly.points
            seg = np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)
            self._pts.append(pts)
            self._cum.append(np.concatenate([[0.0], np.cumsum(seg)]))
            self._trees.append(cKDTree(pts))
        allpts = np.vstack(self._pts)
        self.scale = float(max(np.ptp(allpts[:, 0]), np.ptp(allpts[:, 1])))

    @property
    def n_loops(self):
        return len(self._pts)

    def length(self, loop):
        return float(self._cum[loop][-1])

    def polyline(self, loop):
        """The fine closed polyline of a loop (first point not repeated)."""
        return self._pts[loop]

    def point(self, loop, frac):
        pts = self._pts[loop]
        cum = self._cum[loop]
        s = (float(frac) % 1.0) * cum[-1]
        i = min(int(np.searchsorted(cum, s, side="right")) - 1, len(pts) - 1)
        a = pts[i]
        b = pts[(i + 1) % len(pts)]
        den = max(cum[i + 1] - cum[i], 1e-300)
        return a + (s - cum[i]) / den * (b - a)

    def nearest(self, pt, loop=None):
        """Return (loop, arclength fraction, closest point, distance)."""
        pt = np.asarray(pt, dtype=float)
        best = None
        loops = range(self.n_loops) if loop is None else [loop]
        for li in loops:
            pts = self._pts[li]
            cum = self._cum[li]
            n = len(pts)
            _, k = self._trees[li].query(pt)
            for i in range(k - 2, k + 2):
                a = pts[i % n]
                b = pts[(i + 1) % n]
                ab = b - a
                den = float(ab @ ab)
                t = 0.0 if den == 0 else float(np.clip((pt - a) @ ab / den,
                                                       0.0, 1.0))
                q = a + t * ab
                d = float(np.linalg.norm(pt - q))
                if best is None or d < best[3]:
                    s = cum[i % n] + t * np.linalg.norm(ab)
                    best = (li, float(s / cum[-1]) % 1.0, q, d)
        return best


def loop_from_polygon(vertices, tag=""):
    vertices = [tuple(map(float, v)) for v in vertices]
    segs = [line(vertices[i], vertices[(i + 1) % len(vertices)])
            for i in range(len(vertices))]
    return BoundaryLoop(tuple(segs), tag=tag)


def loop_from_circle(center, r, tag=""):
    return BoundaryLoop((arc(center, r, 0.0, 2 * np.pi),), tag=tag)


def loop_rect(x0, y0, x1, y1, tag=""):
    return loop_from_polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], tag=tag)


def loop_pacman(center, r, opening=np.pi / 2, heading=0.0, tag=""):
    """Disk with a wedge of `opening` removed, mouth bisected by `heading`.

    Counterclockwise shape orientation: the big arc, then two radial edges
    through the center vertex.
    """
    cx, cy = center
    a0 = heading + opening / 2
    a1 = heading + 2 * np.pi - opening / 2
    p_end = (cx + r * np.cos(a1), cy + r * np.sin(a1))
    p_start = (cx + r * np.cos(a0), cy + r * np.sin(a0))
    return BoundaryLoop((arc(center, r, a0, a1),
                         line(p_end, (cx, cy)),
                         line((cx, cy), p_start)), tag=tag)


def loop_droplet(center=(0.0, 0.0), scale=1.0, rotation=0.0, tag=""):
    """The droplet: polar graph with a 2pi cusp at t = +-1 (radius 0.1)."""
    seg = polar_graph(center=center, scale=scale, rotation=rotation,
                      theta_range=(-np.pi, np.pi), radial=("droplet",),
                      angular="cusp", trange=(-1.0, 1.0))
    return BoundaryLoop((seg,), tag=tag)


def builtin_domain(name):
    """Construct one of the named example domains (validated)."""
    fns = {
        "annulus": _annulus,
        "three-disks-in-circle": _three_disks,
        "two-disks-in-rect": _two_disks,
        "disk-pacman-in-rect": _disk_pacman,
        "disk-two-pacmen-in-rect": _disk_two_pacmen,
        "pacman-droplet": _pacman_droplet,
        "square-quadrilateral": _square_quad,
    }
    if name not in fns:
        raise KeyError(f"unknown builtin domain {name!r}; "
                       f"known: {sorted(fns)}")
    return validate_domain(fns[name]())


def _annulus():
    return DomainSpec(
        outer=loop_from_circle((0, 0), 1.0),
        holes=(loop_from_circle((0, 0), 0.5),),
        symmetry_axes=(((0.0, 0.0), (1.0, 0.0)), ((0.0, 0.0), (0.0, 1.0))),
        gamma0_hint=(0.5, 0.0),
        name="annulus",
        hints={"h": 0.08},
    )


def _three_disks():
    r = 1.0 / 6.0
    centers = [(0.5 * np.cos(a), 0.5 * np.sin(a))
               for a in (np.pi / 2, np.pi * 7 / 6, np.pi * 11 / 6)]
    return DomainSpec(
        outer=loop_from_circle((0, 0), 1.0),
        holes=tuple(loop_from_circle(c, r) for c in centers),
        symmetry_axes=(((0.0, 0.0), (0.0, 1.0)),),
        gamma0_hint=(0.0, 0.5 + r),
        name="three-disks-in-circle",
        hints={"h": 0.07, "degenerate_saddles": True},
    )


def _two_disks():
    return DomainSpec(
        outer=loop_rect(-1, -1, 3, 1),
        holes=(loop_from_circle((0, 0), 0.5), loop_from_circle((2, 0), 0.5)),
        symmetry_axes=(((0.0, 0.0), (1.0, 0.0)),),
        gamma0_hint=(-0.5, 0.0),
        name="two-disks-in-rect",
        hints={"h": 0.09},
    )


def _disk_pacman(heading=0.0):
    return DomainSpec(
        outer=loop_rect(-1, -1, 3, 1),
        holes=(loop_from_circle((0, 0), 0.5),
               loop_pacman((2, 0), 0.5, np.pi / 2, heading)),
        symmetry_axes=(((0.0, 0.0), (1.0, 0.0)),),
        gamma0_hint=(-0.5, 0.0),
        name="disk-pacman-in-rect",
        hints={"h": 0.09},
    )


def _disk_two_pacmen(heading_low=0.0, heading_high=0.0):
    return DomainSpec(
        outer=loop_rect(-1, -1, 3, 4),
        holes=(loop_from_circle((0, 2), 0.5),
               loop_pacman((2, 0), 0.5, np.pi / 2, heading_low),
               loop_pacman((2, 3), 0.5, np.pi / 2, heading_high)),
        gamma0_hint=(-0.4954, 2.0673),
        name="disk-two-pacmen-in-rect",
        hints={"h": 0.09},
    )


def _pacman_droplet():
    return DomainSpec(
        outer=loop_droplet(),
        holes=(loop_pacman((0.3, 0.0), 0.25, np.pi / 2, np.pi),),
        gamma0_hint=(0.55, 0.0),
        name="pacman-droplet",
        hints={"h": 0.05},
    )


def _square_quad():
    return DomainSpec(
        outer=loop_rect(0, 0, 1, 1),
        marked_points=((1.0, 1.0), (0.0, 1.0), (0.0, 0.0), (1.0, 0.0)),
        name="square-quadrilateral",
        hints={"h": 0.12},
    )
