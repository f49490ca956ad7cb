"""The conformal map onto the slit rectangle and its canonical post-maps.

The map is phi = u1 + i*d*u2 with u1 the potential, u2 the normalized
conjugate potential, and d the modulus. The rectangle image is
[0, 1] x [0, d]: the outer boundary maps to Re w = 0, every hole to arcs
of Re w = 1, the connector cut sides to Im w = 0 and Im w = d, and every
saddle cut side to a horizontal slit reaching Re w = 1. The exponential
post-map glues the connector sides into the annulus exp(-2*pi/d) <= |z| <= 1.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .field_analysis import extract_contours

__all__ = [
    "MapError",
    "ConformalMap",
    "GridNetwork",
    "CRReport",
    "to_annulus",
]


class MapError(RuntimeError):
    pass


def to_annulus(w, d):
    """Post-map from the slit rectangle onto the slit annulus.

    zeta = exp((2*pi/d) * (-Re w + i*Im w)). The edges Im w = 0 and
    Im w = d land on the same ray, gluing the connector; the outer
    boundary becomes the unit circle and the holes tile the circle of
    radius exp(-2*pi/d). Total on the plane, vectorized over w.
    """
    w = np.asarray(w, dtype=complex)
    z = np.exp((2.0 * np.pi / d) * (-w.real + 1j * w.imag))
    if z.ndim == 0:
        return complex(z)
    return z


def _segment_distances(pts, polys):
    """Distance from each point to the nearest segment of any polyline."""
    pts = np.asarray(pts, dtype=float)
    best = np.full(len(pts), np.inf)
    for poly in polys:
        a = poly[:-1]
        ab = poly[1:] - a
        den = np.einsum("sr,sr->s", ab, ab)
        den[den == 0] = 1.0
        for lo in range(0, len(pts), 2048):
            p = pts[lo:lo + 2048]
            ap = p[:, None, :] - a[None, :, :]
            t = np.clip(np.einsum("psr,sr->ps", ap, ab) / den, 0.0, 1.0)
            q = ap - t[:, :, None] * ab[None, :, :]
            d2 = np.einsum("psr,psr->ps", q, q)
            best[lo:lo + 2048] = np.minimum(best[lo:lo + 2048],
                                            np.sqrt(d2.min(axis=1)))
    return best


def _nearest_on_polyline(poly, z):
    """(foot point, unit tangent) of the polyline segment nearest to z."""
    a = poly[:-1]
    ab = poly[1:] - a
    den = np.einsum("sr,sr->s", ab, ab)
    den[den == 0] = 1.0
    ap = z[None, :] - a
    t = np.clip(np.einsum("sr,sr->s", ap, ab) / den, 0.0, 1.0)
    q = a + t[:, None] * ab
    k = int(np.argmin(np.einsum("sr,sr->s", z[None, :] - q, z[None, :] - q)))
    tang = ab[k] / max(float(np.linalg.norm(ab[k])), 1e-300)
    return q[k], tang


@dataclass(frozen=True)
class GridNetwork:
    """Preimages of the canonical orthogonal grid, as domain polylines.

    u1 holds (level, polylines) pairs of the potential's equipotentials
    (annulus circles); u2 the same for the conjugate (annulus rays).
    """

    u1: tuple
    u2: tuple

    def all_polylines(self):
        for _, polys in self.u1 + self.u2:
            yield from polys


@dataclass(frozen=True)
class CRReport:
    """Cauchy-Riemann residuals of the map at interior sample points.

    r1 = |d(u1)/dx - d(v)/dy| and r2 = |d(u1)/dy + d(v)/dx| with v the
    unnormalized conjugate d*u2; ux and vy are the two derivatives whose
    match the residual r1 measures, kept for contour export.
    """

    points: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    ux: np.ndarray
    vy: np.ndarray
    max_residual: float
    mean_residual: float

    def to_table(self):
        """The samples as a tab-separated table with a header line."""
        lines = ["x\ty\tr1\tr2\tux\tvy"]
        for (x, y), r1, r2, ux, vy in zip(self.points, self.r1, self.r2,
                                          self.ux, self.vy):
            lines.append(f"{x:.9g}\t{y:.9g}\t{r1:.6e}\t{r2:.6e}"
                         f"\t{ux:.9g}\t{vy:.9g}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ConformalMap:
    """phi = u1 + i*d*u2 from the domain onto the slit rectangle.

    u1 lives on the closed mesh and u2, normalized to [0, 1], on the
    opened mesh, so u2 is two-valued exactly on the cuts; points there
    need a side hint. cuts and conj are None for a quadrilateral map.
    """

    u1: object
    u2: object
    d: float
    cuts: Optional[object] = None
    conj: Optional[object] = None
    saddle_values: tuple = ()

    def _cut_polylines(self):
        if self.cuts is None:
            return []
        return [np.asarray(c.polyline, dtype=float) for c in self.cuts.cuts]

    def map_points(self, pts, side_hint=None):
        """Complex rectangle images of the points.

        Points on a cut are two-valued in the imaginary part; side_hint
        is a nearby point on the intended side, used to displace on-cut
        samples off the cut before evaluating. Without a hint, points
        within 1e-7 of a cut (relative to the domain scale) are refused.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        scale = self.u1._scale
        eps = 1e-8 * scale
        polys = self._cut_polylines()
        ev = pts
        if polys:
            dist = _segment_distances(pts, polys)
            close = dist < 10.0 * eps
            if np.any(close):
                if side_hint is None:
                    k = int(np.nonzero(close)[0][0])
                    raise MapError(
                        f"point {pts[k]} lies on a cut; the conjugate is "
                        "two-valued there, pass side_hint")
                hint = np.asarray(side_hint, dtype=float)
                ev = pts.copy()
                for k in np.nonzero(close)[0]:
                    best = None
                    for poly in polys:
                        q, tang = _nearest_on_polyline(poly, pts[k])
                        dd = float(np.linalg.norm(pts[k] - q))
                        if best is None or dd < best[0]:
                            best = (dd, q, tang)
                    _, q, tang = best
                    nrm = np.array([-tang[1], tang[0]])
                    side = math.copysign(1.0, float((hint - q) @ nrm))
                    ev[k] = q + eps * side * nrm
        re = self.u1.evaluate(pts)
        im = self.d * self.u2.evaluate(ev)
        w = re + 1j * im
        return w

    def map_point(self, z, side_hint=None):
        """Complex rectangle image of one point; see map_points."""
        return complex(self.map_points(np.asarray(z, dtype=float)[None, :],
                                       side_hint=side_hint)[0])

    def to_annulus(self, w):
        """Slit-annulus image of rectangle values; see to_annulus()."""
        return to_annulus(w, self.d)

    def rectangle_slits(self):
        """Horizontal slit segments of the rectangle image.

        Every saddle-cut side whose constant lies strictly between 0 and
        d is a slit from (saddle value, v) to (1, v); a degenerate saddle
        contributes two half-slits at equal v that join at its abscissa.
        """
        if self.conj is None or self.conj.dirichlet is None:
            return []
        segs = []
        for (name, side), v in self.conj.dirichlet.items():
            cut = self.cuts[name]
            if cut.saddle is None:
                continue
            x0 = float(self.saddle_values[cut.saddle])
            segs.append((name, side, np.array([x0, v]), np.array([1.0, v])))
        return segs

    def image_grid(self, n_radial=8, n_angular=16):
        """Domain preimages of the canonical orthogonal grid.

        Equipotentials of u1 at n_radial interior levels of (0, 1) and of
        u2 at n_angular - 1 interior levels of (0, 1); the u2 level 0 is
        the connector seam and is omitted.
        """
        lv1 = [(k + 1.0) / (n_radial + 1.0) for k in range(n_radial)]
        lv2 = [k / float(n_angular) for k in range(1, n_angular)]
        g1 = tuple((lv, tuple(extract_contours(self.u1, lv))) for lv in lv1)
        g2 = tuple((lv, tuple(extract_contours(self.u2, lv))) for lv in lv2)
        return GridNetwork(u1=g1, u2=g2)

    def cauchy_riemann_report(self, sample_density=48, exclude_cut_tube=True,
                              saddle_ball=2.0, tube=1.0):
        """Cauchy-Riemann residuals on an interior sample grid.

        sample_density is the grid resolution across the longer bounding
        box side. Samples inside saddle_ball (resp. tube) local element
        sizes of a saddle (resp. of a cut, when exclude_cut_tube) are
        dropped: the map is singular at saddles and two-valued on cuts.
        """
        nodes = self.u1.mesh.nodes
        lo = nodes.min(axis=0)
        hi = nodes.max(axis=0)
        span = hi - lo
        nx = max(2, int(round(sample_density * span[0] / span.max())))
        ny = max(2, int(round(sample_density * span[1] / span.max())))
        xs = lo[0] + (np.arange(nx) + 0.5) * span[0] / nx
        ys = lo[1] + (np.arange(ny) + 0.5) * span[1] / ny
        pts = np.column_stack([np.repeat(xs, ny), np.tile(ys, nx)])

        pts = pts[_inside_mask(self.u1.mesh.spec, pts)]
        if len(pts) == 0:
            raise MapError("no interior sample points; raise sample_density")
        size = self.u1.local_size(pts)
        keep = np.ones(len(pts), dtype=bool)
        if self.cuts is not None:
            for k, s in enumerate(self.cuts.saddles):
                r = np.linalg.norm(pts - np.asarray(s.point)[None, :], axis=1)
                keep &= r > saddle_ball * size
            if exclude_cut_tube:
                dist = _segment_distances(pts, self._cut_polylines())
                keep &= dist > tube * size
        pts = pts[keep]

        g1 = self.u1.gradient_at(pts)
        gv = self.d * self.u2.gradient_at(pts)
        r1 = np.abs(g1[:, 0] - gv[:, 1])
        r2 = np.abs(g1[:, 1] + gv[:, 0])
        rmax = float(np.maximum(r1, r2).max())
        rmean = float(np.maximum(r1, r2).mean())
        return CRReport(points=pts, r1=r1, r2=r2, ux=np.abs(g1[:, 0]),
                        vy=np.abs(gv[:, 1]), max_residual=rmax,
                        mean_residual=rmean)


def _inside_mask(spec, pts):
    """Strict interior test against the discretized domain loops."""
    from .geometry import BoundaryProjector

    proj = BoundaryProjector(spec)
    inside = _crossing_parity(proj.polyline(0), pts)
    for li in range(1, len(spec.loops)):
        inside &= ~_crossing_parity(proj.polyline(li), pts)
    return inside


def _crossing_parity(poly, pts):
    """Even-odd containment of points in a closed polyline."""
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    a = poly
    b = np.roll(poly, -1, axis=0)
    ay = a[None, :, 1]
    by = b[None, :, 1]
    ax = a[None, :, 0]
    bx = b[None, :, 0]
    span = (ay > y) != (by > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = ax + (y - ay) * (bx - ax) / (by - ay)
    hits = span & (x < xi)
    return hits.sum(axis=1) % 2 == 1
