"""Conforming triangulation with quality refinement, grading, and cut surgery.

The mesher runs a Ruppert-style loop around scipy's Delaunay kernel:
boundary and cut polylines are constraint segments, missing or encroached
segments are split (new boundary nodes are placed back on the exact curve
through the stored parameter interval), and oversized or skinny interior
triangles are fixed by circumcenter insertion, subject to a sizing function
with geometric grading toward declared corners and cusps.

Cuts are embedded as interior constraint edges; `open_cuts` then duplicates
the nodes along them, turning each cut into a pair of boundary sides, which
is how the conjugate problem sees the domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import Delaunay, cKDTree

from . import geometry as geo
from ._geomutil import points_in_polygon


class MeshError(RuntimeError):
    pass


@dataclass(frozen=True)
class RefinementRule:
    """Geometric grading toward a point: layer k has size ~ h * ratio**k."""

    center: tuple
    levels: int = 8
    ratio: float = 0.2
    relax_quality: bool = False    # skip the min-angle test near the center


@dataclass(frozen=True)
class EdgeTag:
    kind: str                      # 'loop' or 'cut'
    name: str                      # loop tag (E0..) or cut leg id
    side: Optional[str] = None     # '+' / '-' on opened cut sides
    subarc: Optional[int] = None   # quadrilateral arc index 1..4


def default_rules(spec, h):
    """Grading rules derived from the domain's corners and cusps.

    Re-entrant corners (domain angle > pi) get moderate grading; cusps get
    strong grading with the quality test relaxed in the innermost layers.
    """
    rules = []
    for f in geo.domain_corner_features(spec):
        if f["kind"] == "cusp":
            rules.append(RefinementRule(tuple(f["point"]), levels=12,
                                        ratio=0.15, relax_quality=True))
        elif f["domain_angle"] > np.pi + 1e-6:
            rules.append(RefinementRule(tuple(f["point"]), levels=8, ratio=0.2))
    return rules


class SizingFunction:
    """min(h, per-rule floor/linear growth), vectorized over points."""

    def __init__(self, h, rules, scale):
        self.h = float(h)
        self.rules = list(rules)
        # Hard floor on the local size.  Three nearly collinear points with
        # spacing s lift onto the Delaunay paraboloid with the middle point
        # only ~s^2/2 off its neighbours' chord; below ~2.5e-7 * scale qhull
        # merges it away as coplanar and constraint recovery can never
        # terminate.  1e-6 * scale keeps an order of magnitude of margin.
        self.floor = 1e-6 * scale
        self.centers = (np.array([r.center for r in self.rules], dtype=float)
                        if self.rules else np.zeros((0, 2)))
        self.smin = np.array(
            [max(self.h * r.ratio ** r.levels, self.floor) for r in self.rules])
        self.slope = np.array([1.0 - r.ratio for r in self.rules])

    def __call__(self, pts):
        pts = np.atleast_2d(pts)
        s = np.full(len(pts), self.h)
        for k in range(len(self.rules)):
            d = np.linalg.norm(pts - self.centers[k], axis=1)
            s = np.minimum(s, np.maximum(self.smin[k], self.slope[k] * d))
        return s

    def relax_mask(self, pts):
        """True where the min-angle requirement is suspended.

        Near a cusp the domain wraps a needle whose width shrinks
        quadratically while isotropic sizing shrinks linearly, so skinny
        triangles there are unavoidable; the zone scales with h.
        """
        pts = np.atleast_2d(pts)
        m = np.zeros(len(pts), dtype=bool)
        for k, r in enumerate(self.rules):
            if not r.relax_quality:
                continue
            d = np.linalg.norm(pts - self.centers[k], axis=1)
            m |= d < 0.7 * self.h
        return m


class Mesh:
    """Conforming triangle mesh with tagged boundary and embedded cuts."""

    def __init__(self, nodes, triangles, edge_nodes, edge_tags, edge_geom,
                 loop_chains, cut_chains, spec=None, h=None, rules=(),
                 is_cut=False, cut_sides=None, marked_nodes=None, uncut=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int32)
        self.edge_nodes = np.asarray(edge_nodes, dtype=np.int32).reshape(-1, 2)
        self.edge_tags = list(edge_tags)
        self.edge_geom = list(edge_geom)
        self.loop_chains = dict(loop_chains)
        self.cut_chains = dict(cut_chains)
        self.spec = spec
        self.h = h
        self.rules = tuple(rules)
        self.is_cut = is_cut
        self.cut_sides = dict(cut_sides or {})
        self.marked_nodes = marked_nodes
        self.uncut = uncut
        self._cache = {}

    # -- basic quantities ---------------------------------------------------

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def triangle_areas(self):
        p = self.nodes[self.triangles]
        return 0.5 * np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def edge_count(self):
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return len(np.unique(e[:, 0].astype(np.int64) * self.n_nodes + e[:, 1]))

    def euler_characteristic(self):
        return self.n_nodes - self.edge_count() + self.n_triangles

    # -- adjacency ----------------------------------------------------------

    def _edge_map(self):
        """sorted-edge code -> list of (triangle, local edge index)."""
        if "edge_map" not in self._cache:
            t = self.triangles.astype(np.int64)
            n = self.n_nodes
            emap = {}
            for le, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
                a = np.minimum(t[:, i], t[:, j]) * n + np.maximum(t[:, i], t[:, j])
                for ti, code in enumerate(a):
                    emap.setdefault(code, []).append((ti, le))
            self._cache["edge_map"] = emap
        return self._cache["edge_map"]

    def boundary_directed_edges(self):
        """Directed edges (domain on the left) with one incident triangle."""
        out = []
        n = self.n_nodes
        for code, tris in self._edge_map().items():
            if len(tris) == 1:
                ti, le = tris[0]
                tri = self.triangles[ti]
                a, b = tri[le], tri[(le + 1) % 3]
                out.append((int(a), int(b)))
        return out

    def boundary_cycles(self):
        """Boundary cycles as node-id lists, each traversed domain-on-left."""
        edges = self.boundary_directed_edges()
        nxt = {}
        for a, b in edges:
            if a in nxt:
                raise MeshError("non-manifold boundary at node %d" % a)
            nxt[a] = b
        cycles = []
        seen = set()
        for a in sorted(nxt):
            if a in seen:
                continue
            cyc = [a]
            seen.add(a)
            b = nxt[a]
            while b != a:
                cyc.append(b)
                seen.add(b)
                b = nxt[b]
            cycles.append(cyc)
        return cycles

    def stats(self):
        areas = self.triangle_areas()
        p = self.nodes[self.triangles]
        el = np.stack([np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
                       np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                       np.linalg.norm(p[:, 0] - p[:, 2], axis=1)])
        with np.errstate(invalid="ignore"):
            q = el.min(axis=0) * el.max(axis=0) / np.maximum(areas, 1e-300)
        return {
            "nodes": self.n_nodes,
            "triangles": self.n_triangles,
            "area": float(areas.sum()),
            "min_edge": float(el.min()),
            "max_edge": float(el.max()),
            "boundary_edges": len(self.edge_nodes),
        }


# ---------------------------------------------------------------------------
# PSLG assembly


class _Builder:
    def __init__(self, sizing, scale):
        self.pts = []            # list of (x, y)
        self.constraint_pt = []  # True for boundary/cut polyline vertices
        self.sizing = sizing
        self.scale = scale
        # distance-based dedup: coincident points must become one id, or
        # qhull merges the twins and the loser's constraint edges can never
        # be recovered
        self.snap_radius = max(1e-10 * scale, 1e-14)
        self.snap = {}           # grid cell -> list of ids
        # constraint segments
        self.seg_a = []
        self.seg_b = []
        self.seg_kind = []       # 'loop' | 'cut'
        self.seg_name = []       # loop tag or leg id
        self.seg_geom = []       # (loop_idx, seg_idx, ta, tb) or None
        self.loop_next = {}      # tag -> {a: b} traversal successor
        self.cut_chain = {}      # leg -> [ids]

    def add_point(self, xy, constraint=False):
        x, y = float(xy[0]), float(xy[1])
        d = self.snap_radius
        cx, cy = int(round(x / d)), int(round(y / d))
        for ox in (0, -1, 1):
            for oy in (0, -1, 1):
                for i in self.snap.get((cx + ox, cy + oy), ()):
                    px, py = self.pts[i]
                    if (px - x) ** 2 + (py - y) ** 2 <= d * d:
                        if constraint:
                            self.constraint_pt[i] = True
                        return i
        self.pts.append((x, y))
        self.constraint_pt.append(bool(constraint))
        i = len(self.pts) - 1
        self.snap.setdefault((cx, cy), []).append(i)
        return i

    def add_segment(self, a, b, kind, name, geom=None):
        self.seg_a.append(a)
        self.seg_b.append(b)
        self.seg_kind.append(kind)
        self.seg_name.append(name)
        self.seg_geom.append(geom)
        if kind == "loop":
            self.loop_next.setdefault(name, {})[a] = b

    def split_segment(self, si, spec):
        """Split constraint si at its (curve-exact) midpoint; returns new id."""
        a, b = self.seg_a[si], self.seg_b[si]
        geom = self.seg_geom[si]
        if geom is not None:
            li, ki, ta, tb = geom
            seg = spec.loops[li].segments[ki]
            tm = 0.5 * (ta + tb)
            xy = seg.point(tm)
            gm1, gm2 = (li, ki, ta, tm), (li, ki, tm, tb)
        else:
            pa = np.array(self.pts[a])
            pb = np.array(self.pts[b])
            xy = 0.5 * (pa + pb)
            gm1 = gm2 = None
        m = self.add_point(xy, constraint=True)
        if m == a or m == b:
            raise MeshError("constraint split collapsed to an endpoint; "
                            "geometry unresolvable at this scale")
        kind, name = self.seg_kind[si], self.seg_name[si]
        self.seg_b[si] = m
        self.seg_geom[si] = gm1
        self.add_segment(m, b, kind, name, gm2)
        if kind == "loop":
            self.loop_next[name][a] = m
            self.loop_next[name][m] = b
        else:
            ch = self.cut_chain[name]
            ch.insert(ch.index(a) + 1, m)
        return m

    def chain_order(self, tag):
        nxt = self.loop_next[tag]
        start = min(nxt)
        out = [start]
        b = nxt[start]
        while b != start:
            out.append(b)
            b = nxt[b]
        return out


def _insert_boundary_vertex(bld, spec, xy, prefer_tag=None, max_dist=None):
    """Snap xy onto the nearest constraint chain vertex or split an edge.

    Returns the node id of a boundary vertex lying exactly on the curve,
    or None when max_dist is given and no loop passes that close.
    """
    best = (np.inf, None)
    pts = np.asarray(bld.pts)
    for si in range(len(bld.seg_a)):
        if bld.seg_kind[si] != "loop":
            continue
        if prefer_tag is not None and bld.seg_name[si] != prefer_tag:
            continue
        a, b = bld.seg_a[si], bld.seg_b[si]
        pa, pb = pts[a], pts[b]
        ab = pb - pa
        denom = ab @ ab
        t = 0.0 if denom == 0 else np.clip((xy - pa) @ ab / denom, 0.0, 1.0)
        d = np.linalg.norm(xy - (pa + t * ab))
        if d < best[0]:
            best = (d, (si, t))
    if best[1] is None:
        raise MeshError("no boundary to attach to")
    if max_dist is not None and best[0] > max_dist:
        return None
    si, t = best[1]
    a, b = bld.seg_a[si], bld.seg_b[si]
    elen = np.linalg.norm(pts[b] - pts[a])
    if t * elen < 0.3 * elen:
        return a
    if (1 - t) * elen < 0.3 * elen:
        return b
    geom = bld.seg_geom[si]
    if geom is not None:
        li, ki, ta, tb = geom
        seg = spec.loops[li].segments[ki]
        res = minimize_scalar(
            lambda tt: float(np.sum((seg.point(tt) - xy) ** 2)),
            bounds=(min(ta, tb), max(ta, tb)), method="bounded",
            options={"xatol": 1e-14})
        tm = float(res.x)
        xym = seg.point(tm)
        gm1, gm2 = (li, ki, ta, tm), (li, ki, tm, tb)
    else:
        xym = pts[a] + t * (pts[b] - pts[a])
        gm1 = gm2 = None
    m = bld.add_point(xym, constraint=True)
    kind, name = bld.seg_kind[si], bld.seg_name[si]
    bld.seg_b[si] = m
    bld.seg_geom[si] = gm1
    bld.add_segment(m, b, kind, name, gm2)
    bld.loop_next[name][a] = m
    bld.loop_next[name][m] = b
    return m


def _blunt_cusp(pts, geoms, cusp, radius):
    """Drop polyline vertices within radius of the cusp point and bridge
    the two survivors with a straight edge (provenance None)."""
    n = len(pts)
    d = np.linalg.norm(np.asarray(pts) - cusp, axis=1)
    j = int(np.argmin(d))
    if d[j] > radius:
        return pts, geoms
    drop = {j}
    k = j
    while d[(k - 1) % n] < radius:
        k = (k - 1) % n
        drop.add(k)
        if len(drop) > n - 4:
            raise MeshError("cusp blunting would consume the loop")
    k = j
    while d[(k + 1) % n] < radius:
        k = (k + 1) % n
        drop.add(k)
        if len(drop) > n - 4:
            raise MeshError("cusp blunting would consume the loop")
    last = k                      # last dropped index walking forward
    start = (last + 1) % n        # first survivor after the gap
    order = [(start + i) % n for i in range(n)]
    keep = [i for i in order if i not in drop]
    new_pts = [pts[i] for i in keep]
    new_geoms = []
    for a in range(len(keep)):
        i = keep[a]
        i_next = keep[(a + 1) % len(keep)]
        if (i + 1) % n == i_next:
            new_geoms.append(geoms[i])
        else:
            new_geoms.append(None)   # the bridging edge across the tip
    return new_pts, new_geoms


def _resample_polyline(poly, sizing):
    """Arc-length resampling of an open polyline to the local sizing."""
    poly = np.asarray(poly, dtype=float)
    seglen = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    keep = np.concatenate([[True], seglen > 1e-14])
    poly = poly[keep]
    if len(poly) < 2:
        raise MeshError("degenerate cut polyline")
    seglen = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seglen)])
    total = s[-1]
    out = [poly[0]]
    pos = 0.0
    while True:
        step = float(sizing(out[-1][None, :])[0])
        pos = pos + step
        if pos >= total - 0.45 * step:
            break
        out.append(np.array([np.interp(pos, s, poly[:, 0]),
                             np.interp(pos, s, poly[:, 1])]))
    out.append(poly[-1])
    return np.asarray(out)


# ---------------------------------------------------------------------------
# the refinement loop


def triangulate(spec, h, rules=None, embed=None, fixed_points=None,
                min_angle=20.0, max_rounds=80, cusp_blunt=2e-3, trace=False):
    """Mesh the validated domain at target edge size h.

    embed: optional {leg_id: open polyline}; the polylines become unions of
    interior mesh edges (recorded in cut_chains), with endpoints attached to
    the boundary loops they touch. fixed_points become interior mesh nodes.

    cusp_blunt: cusp tips are truncated at this radius (times the domain
    scale) and bridged with a straight edge. A quadratic needle is thinner
    than floating point resolution near its tip, so meshing it exactly is
    impossible; the bridged sliver has area of order radius cubed.
    """
    spec = geo.validate_domain(spec)
    if h <= 0:
        raise ValueError("h must be positive")
    allpts = np.vstack([geo.discretize_loop(lp, 1e-3).points
                        for lp in spec.loops])
    scale = max(np.ptp(allpts[:, 0]), np.ptp(allpts[:, 1]))
    if rules is None:
        rules = default_rules(spec, h)
    sizing = SizingFunction(h, rules, scale)
    bld = _Builder(sizing, scale)

    # boundary polylines: curvature-adaptive, then sizing-driven splits
    cusp_pts = [np.asarray(f["point"]) for f in geo.domain_corner_features(spec)
                if f["kind"] == "cusp"]
    for li, lp in enumerate(spec.loops):
        poly = geo.discretize_loop(lp, tol=h * h / 8.0, max_len=h)
        pts_list = [np.asarray(p, float) for p in poly.points]
        geom_list = [(li, int(poly.edge_seg[i]), float(poly.edge_t0[i]),
                      float(poly.edge_t1[i])) for i in range(len(pts_list))]
        for cp in cusp_pts:
            pts_list, geom_list = _blunt_cusp(pts_list, geom_list, cp,
                                              cusp_blunt * scale)
        ids = [bld.add_point(p, constraint=True) for p in pts_list]
        n = len(ids)
        for i in range(n):
            bld.add_segment(ids[i], ids[(i + 1) % n], "loop", lp.tag,
                            geom_list[i])

    marked_nodes = None
    if spec.marked_points is not None:
        marked_nodes = [
            _insert_boundary_vertex(bld, spec, np.asarray(p, float), "E0")
            for p in spec.marked_points]

    if embed:
        if not isinstance(embed, dict):
            embed = {k: p for k, p in enumerate(embed)}
        for leg in sorted(embed):
            poly = _resample_polyline(np.asarray(embed[leg], float), sizing)
            ids = []
            for k, p in enumerate(poly):
                nid = None
                if k in (0, len(poly) - 1):
                    # endpoints on a boundary loop are welded into its
                    # chain so the cut meets the boundary at a mesh node
                    reach = 0.5 * float(sizing(p[None, :])[0])
                    nid = _insert_boundary_vertex(bld, spec, p,
                                                  max_dist=reach)
                if nid is None:
                    nid = bld.add_point(p, constraint=True)
                if ids and nid == ids[-1]:
                    continue
                ids.append(nid)
            if len(ids) < 2:
                raise MeshError(f"cut leg {leg!r} collapsed while embedding")
            bld.cut_chain[leg] = ids
            for i in range(len(ids) - 1):
                bld.add_segment(ids[i], ids[i + 1], "cut", leg, None)

    if fixed_points:
        for p in fixed_points:
            bld.add_point(np.asarray(p, float), constraint=True)

    # sizing-driven pre-split of constraint segments
    changed = True
    guard = 0
    while changed and guard < 60:
        changed = False
        guard += 1
        for si in range(len(bld.seg_a)):
            a, b = bld.seg_a[si], bld.seg_b[si]
            pa = np.array(bld.pts[a])
            pb = np.array(bld.pts[b])
            ln = np.linalg.norm(pb - pa)
            if ln > 1.45 * sizing(0.5 * (pa + pb)[None, :])[0]:
                bld.split_segment(si, spec)
                changed = True

    beta = 1.0 / (2.0 * np.sin(np.radians(min_angle)))
    for rnd in range(max_rounds):
        pts = np.asarray(bld.pts)
        npts = len(pts)
        tri = _delaunay(pts, np.asarray(bld.constraint_pt))
        simp = tri.simplices.astype(np.int64)
        codes = set()
        for i, j in ((0, 1), (1, 2), (2, 0)):
            lo = np.minimum(simp[:, i], simp[:, j])
            hi = np.maximum(simp[:, i], simp[:, j])
            codes.update((lo * npts + hi).tolist())

        seg_a = np.asarray(bld.seg_a)
        seg_b = np.asarray(bld.seg_b)
        lo = np.minimum(seg_a, seg_b).astype(np.int64)
        hi = np.maximum(seg_a, seg_b).astype(np.int64)
        seg_codes = lo * npts + hi
        present = np.fromiter((c in codes for c in seg_codes), bool,
                              len(seg_codes))
        mids = 0.5 * (pts[seg_a] + pts[seg_b])
        rads = 0.5 * np.linalg.norm(pts[seg_b] - pts[seg_a], axis=1)
        s_end = np.minimum(sizing(pts[seg_a]), sizing(pts[seg_b]))
        floor_ok = 2 * rads > np.maximum(sizing.floor, 0.45 * s_end)

        # encroachment by other constraint vertices (interior Steiner points
        # near a segment are legitimate and must not trigger splits)
        cmask = np.asarray(bld.constraint_pt)
        cidx = np.nonzero(cmask)[0]
        ctree = cKDTree(pts[cidx])
        encroached = np.zeros(len(seg_a), dtype=bool)
        kq = min(6, len(cidx))
        dq, iq = ctree.query(mids, k=kq)
        dq = dq.reshape(len(mids), -1)
        iq = iq.reshape(len(mids), -1)
        for col in range(dq.shape[1]):
            gid = cidx[iq[:, col]]
            hit = ((dq[:, col] < rads * (1 - 1e-12)) &
                   (gid != seg_a) & (gid != seg_b))
            encroached |= hit
        to_split = sorted(set(np.nonzero(~present)[0]) |
                          set(np.nonzero(encroached & floor_ok)[0]))
        if to_split:
            if trace:
                print(f"[mesh] round {rnd}: {npts} pts, "
                      f"{int((~present).sum())} missing, "
                      f"{int((encroached & floor_ok).sum())} encroached")
            for si in to_split:
                bld.split_segment(si, spec)
            continue

        # interior quality and size
        inside = _classify_inside(bld, pts, simp, set(seg_codes.tolist()), npts)
        tsel = simp[inside]
        if len(tsel) == 0:
            raise MeshError("empty domain triangulation; h too coarse?")
        a_, b_, c_ = pts[tsel[:, 0]], pts[tsel[:, 1]], pts[tsel[:, 2]]
        cc, cr = _circumcenters(a_, b_, c_)
        el = np.stack([np.linalg.norm(b_ - a_, axis=1),
                       np.linalg.norm(c_ - b_, axis=1),
                       np.linalg.norm(a_ - c_, axis=1)])
        cent = (a_ + b_ + c_) / 3.0
        starget = sizing(cent)
        relaxed = sizing.relax_mask(cent)
        # in cusp zones slivers are unavoidable and have huge circumradii;
        # there the longest edge is the meaningful size measure
        bad_size = np.where(relaxed, el.max(axis=0) > 1.2 * starget,
                            cr > 0.72 * starget)
        bad_shape = (cr / el.min(axis=0) > beta) & ~relaxed
        bad = np.nonzero(bad_size | bad_shape)[0]
        if len(bad) == 0:
            break
        order = bad[np.argsort(-cr[bad])]
        cand = cc[order]
        cand_ok = _inside_domain(bld, cand)
        scand = sizing(cand)
        crs = cr[order]
        accepted = []
        split_queue = set()
        acc_tree = None
        tail = []
        for k in range(len(order)):
            # triangles already much finer than the sizing target are left
            # alone; this bounds the refinement depth where the geometry
            # forces short edges (smoothing cleans up afterwards)
            if not cand_ok[k] or crs[k] < 0.30 * scand[k]:
                continue
            c = cand[k]
            near = False
            if acc_tree is not None:
                if acc_tree.query(c)[0] < 0.75 * scand[k]:
                    near = True
            if not near and tail:
                dd = np.linalg.norm(np.asarray(tail) - c, axis=1)
                near = dd.min() < 0.75 * scand[k]
            if near:
                continue
            dseg = np.linalg.norm(mids - c, axis=1)
            enc = np.nonzero(dseg < rads * (1 - 1e-12))[0]
            if len(enc):
                for si in enc:
                    if floor_ok[si]:
                        split_queue.add(int(si))
                continue
            accepted.append(c)
            tail.append(c)
            if len(tail) >= 512:
                acc_tree = cKDTree(np.asarray(accepted))
                tail = []
        if trace:
            print(f"[mesh] round {rnd}: {npts} pts, {len(bad)} bad "
                  f"(size {int(bad_size.sum())}, shape {int(bad_shape.sum())}),"
                  f" accept {len(accepted)}, queue {len(split_queue)}")
        if not accepted and not split_queue:
            break
        n_before = len(bld.pts)
        for si in sorted(split_queue):
            bld.split_segment(si, spec)
        for c in accepted:
            bld.add_point(c)
        if len(bld.pts) == n_before:
            break    # all candidates snapped onto existing points
    else:
        raise MeshError("refinement did not settle in %d rounds" % max_rounds)

    _smooth_free_points(bld)
    return _finalize(bld, spec, h, rules, marked_nodes)


def _delaunay(pts, must_keep=None):
    """Delaunay triangulation that never silently drops a required vertex.

    qhull merges a point into a facet when its paraboloid lift falls within
    roundoff of it (nearly collinear triples at small spacing).  A dropped
    constraint vertex makes its segments unrecoverable, so such calls are
    retried with joggled input, which keeps every point as a vertex.
    """
    tri = Delaunay(pts)
    if len(tri.coplanar) and must_keep is not None:
        if np.any(must_keep[tri.coplanar[:, 0]]):
            tri = Delaunay(pts, qhull_options="QJ Qbb Qc Qz Q12")
    return tri


def _mesh_min_quality(bld, pts):
    """min over domain triangles of elmin/circumradius, cusp zones excluded.

    Also reports whether every constraint segment is a Delaunay edge.
    """
    n = len(pts)
    tri = _delaunay(pts, np.asarray(bld.constraint_pt))
    simp = tri.simplices.astype(np.int64)
    codes = set()
    for i, j in ((0, 1), (1, 2), (2, 0)):
        codes.update((np.minimum(simp[:, i], simp[:, j]) * n +
                      np.maximum(simp[:, i], simp[:, j])).tolist())
    seg_a = np.asarray(bld.seg_a)
    seg_b = np.asarray(bld.seg_b)
    seg_codes = (np.minimum(seg_a, seg_b).astype(np.int64) * n +
                 np.maximum(seg_a, seg_b))
    conforming = all(c in codes for c in seg_codes)
    if not conforming:
        return -np.inf, False
    inside = _classify_inside(bld, pts, simp, set(seg_codes.tolist()), n)
    tsel = simp[inside]
    a_, b_, c_ = pts[tsel[:, 0]], pts[tsel[:, 1]], pts[tsel[:, 2]]
    _, cr = _circumcenters(a_, b_, c_)
    el = np.stack([np.linalg.norm(b_ - a_, axis=1),
                   np.linalg.norm(c_ - b_, axis=1),
                   np.linalg.norm(a_ - c_, axis=1)])
    q = el.min(axis=0) / np.maximum(cr, 1e-300)
    keep = ~bld.sizing.relax_mask((a_ + b_ + c_) / 3.0)
    if not keep.any():
        return np.inf, True
    return float(q[keep].min()), True


def _smooth_free_points(bld, passes=4, damp=0.7):
    """Damped Laplacian smoothing of non-constraint nodes.

    Constraint vertices stay put. A pass is kept only when the worst
    triangle quality does not degrade and every constraint survives as a
    Delaunay edge; otherwise the pass is reverted and smoothing stops.
    """
    free = ~np.asarray(bld.constraint_pt)
    if not free.any():
        return
    qbest, ok = _mesh_min_quality(bld, np.asarray(bld.pts))
    if not ok:
        return
    for _ in range(passes):
        before = list(bld.pts)
        pts = np.asarray(bld.pts)
        n = len(pts)
        tri = _delaunay(pts, np.asarray(bld.constraint_pt))
        simp = tri.simplices.astype(np.int64)
        pairs = np.vstack([simp[:, [0, 1]], simp[:, [1, 2]], simp[:, [2, 0]]])
        pairs = np.vstack([pairs, pairs[:, ::-1]])
        sums = np.zeros((n, 2))
        cnts = np.zeros(n)
        np.add.at(sums, pairs[:, 0], pts[pairs[:, 1]])
        np.add.at(cnts, pairs[:, 0], 1.0)
        avg = np.where((cnts > 0)[:, None],
                       sums / np.maximum(cnts, 1)[:, None], pts)
        target = (1 - damp) * pts + damp * avg
        # containment only needs checking near the boundary
        ctree = cKDTree(pts[~free])
        near, _ = ctree.query(target[free])
        ok = np.ones(int(free.sum()), dtype=bool)
        sel = near < 1.5 * bld.sizing(target[free])
        if sel.any():
            ok[sel] = _inside_domain(bld, target[free][sel])
        move = np.zeros(len(pts), dtype=bool)
        move[np.nonzero(free)[0][ok]] = True
        pts = pts.copy()
        pts[move] = target[move]
        bld.pts = [tuple(p) for p in pts]
        q, conf = _mesh_min_quality(bld, pts)
        if not conf or q < qbest - 1e-12:
            bld.pts = before
            break
        qbest = q


def _circumcenters(a, b, c):
    ab = b - a
    ac = c - a
    d = 2.0 * np.cross(ab, ac)
    d = np.where(np.abs(d) < 1e-300, 1e-300, d)
    ab2 = np.einsum("ij,ij->i", ab, ab)
    ac2 = np.einsum("ij,ij->i", ac, ac)
    ux = (ac[:, 1] * ab2 - ab[:, 1] * ac2) / d
    uy = (ab[:, 0] * ac2 - ac[:, 0] * ab2) / d
    cc = a + np.column_stack([ux, uy])
    cr = np.linalg.norm(cc - a, axis=1)
    return cc, cr


def _loop_polygons(bld):
    polys = {}
    for tag in bld.loop_next:
        order = bld.chain_order(tag)
        polys[tag] = np.asarray(bld.pts)[order]
    return polys


def _inside_domain(bld, pts):
    polys = _loop_polygons(bld)
    ok = points_in_polygon(pts, polys["E0"])
    for tag, poly in polys.items():
        if tag != "E0":
            ok &= ~points_in_polygon(pts, poly)
    return ok


def _classify_inside(bld, pts, simp, seg_codes, npts):
    """Boolean per triangle: inside the domain.

    Triangles are grouped into components not crossing constraint edges;
    one polygon test per component decides membership.
    """
    nt = len(simp)
    codes_all = []
    for i, j in ((0, 1), (1, 2), (2, 0)):
        lo = np.minimum(simp[:, i], simp[:, j])
        hi = np.maximum(simp[:, i], simp[:, j])
        codes_all.append(lo * npts + hi)
    codes_all = np.concatenate(codes_all)
    tri_ids = np.tile(np.arange(nt), 3)
    segarr = np.fromiter(seg_codes, np.int64, len(seg_codes))
    keep = ~np.isin(codes_all, segarr)
    order = np.argsort(codes_all[keep], kind="stable")
    cs = codes_all[keep][order]
    ts = tri_ids[keep][order]
    same = cs[1:] == cs[:-1]
    rows = ts[:-1][same]
    cols = ts[1:][same]
    m = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nt, nt))
    ncomp, labels = connected_components(m, directed=False)
    cent = pts[simp].mean(axis=1)
    inside = np.zeros(nt, dtype=bool)
    for comp in range(ncomp):
        sel = np.nonzero(labels == comp)[0]
        probe = cent[sel[0]][None, :]
        inside[sel] = _inside_domain(bld, probe)[0]
    return inside


def _finalize(bld, spec, h, rules, marked_nodes):
    pts = np.asarray(bld.pts)
    npts = len(pts)
    tri = _delaunay(pts, np.asarray(bld.constraint_pt))
    simp = tri.simplices.astype(np.int64)
    seg_a = np.asarray(bld.seg_a)
    seg_b = np.asarray(bld.seg_b)
    seg_codes = set((np.minimum(seg_a, seg_b).astype(np.int64) * npts +
                     np.maximum(seg_a, seg_b)).tolist())
    inside = _classify_inside(bld, pts, simp, seg_codes, npts)
    tris = simp[inside]
    # orient CCW
    p = pts[tris]
    neg = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]) < 0
    tris[neg] = tris[neg][:, ::-1]

    # drop points used only by exterior triangles (e.g. circumcenters that
    # landed epsilon outside a concave boundary)
    used = np.unique(tris)
    remap = np.full(npts, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    pts = pts[used]
    tris = remap[tris]
    npts = len(pts)

    def rid(i):
        j = remap[int(i)]
        if j < 0:
            raise MeshError("constraint vertex lost from the triangulation")
        return int(j)

    # verify all constraints are mesh edges and count incidences
    t64 = tris
    counts = {}
    for i, j in ((0, 1), (1, 2), (2, 0)):
        lo = np.minimum(t64[:, i], t64[:, j])
        hi = np.maximum(t64[:, i], t64[:, j])
        for c in (lo * npts + hi).tolist():
            counts[c] = counts.get(c, 0) + 1
    edge_nodes = []
    edge_tags = []
    edge_geom = []
    loop_chains = {}
    for si in range(len(bld.seg_a)):
        a, b = rid(bld.seg_a[si]), rid(bld.seg_b[si])
        code = min(a, b) * npts + max(a, b)
        k = counts.get(code, 0)
        if bld.seg_kind[si] == "loop":
            if k != 1:
                raise MeshError(
                    f"boundary edge ({a},{b}) of {bld.seg_name[si]} has "
                    f"{k} incident triangles; h too coarse to separate loops?")
            edge_nodes.append((a, b))
            edge_tags.append(EdgeTag("loop", bld.seg_name[si]))
            edge_geom.append(bld.seg_geom[si])
        else:
            if k != 2:
                raise MeshError(
                    f"cut edge ({a},{b}) of {bld.seg_name[si]} is not interior")
    for tag in bld.loop_next:
        loop_chains[tag] = np.asarray([rid(i) for i in bld.chain_order(tag)],
                                      dtype=np.int32)
    cut_chains = {leg: [rid(i) for i in ch]
                  for leg, ch in bld.cut_chain.items()}

    mesh = Mesh(pts, tris.astype(np.int32), np.asarray(edge_nodes),
                edge_tags, edge_geom, loop_chains, cut_chains,
                spec=spec, h=h, rules=rules,
                marked_nodes=(np.asarray([rid(i) for i in marked_nodes],
                                         dtype=np.int32)
                              if marked_nodes else None))
    _tag_subarcs(mesh)
    _check_mesh(mesh)
    return mesh


def _tag_subarcs(mesh):
    """Label outer-loop edges with the quadrilateral arc index 1..4."""
    if mesh.marked_nodes is None:
        return
    chain = list(mesh.loop_chains["E0"])
    pos = {n: i for i, n in enumerate(chain)}
    marks = [pos[int(n)] for n in mesh.marked_nodes]
    n = len(chain)
    arc_of = np.zeros(n, dtype=np.int32)
    for k in range(4):
        i0 = marks[k]
        i1 = marks[(k + 1) % 4]
        i = i0
        while i != i1:
            arc_of[i] = k + 1
            i = (i + 1) % n
    edge_arc = {}
    for i in range(n):
        a, b = chain[i], chain[(i + 1) % n]
        edge_arc[(a, b)] = int(arc_of[i])
    for ei, (a, b) in enumerate(mesh.edge_nodes):
        t = mesh.edge_tags[ei]
        if t.kind == "loop" and t.name == "E0":
            mesh.edge_tags[ei] = EdgeTag("loop", "E0",
                                         subarc=edge_arc[(int(a), int(b))])


def _check_mesh(mesh):
    areas = mesh.triangle_areas()
    if (areas <= 0).any():
        raise MeshError("non-positive triangle area")
    cycles = mesh.boundary_cycles()
    expect = 2 - len(cycles)
    chi = mesh.euler_characteristic()
    if chi != expect:
        raise MeshError(f"Euler characteristic {chi} != {expect}")


# ---------------------------------------------------------------------------
# cut surgery


def open_cuts(mesh):
    """Duplicate nodes along embedded cuts, exposing gamma+ / gamma- sides.

    Returns a new Mesh whose cut edges are boundary edges tagged with the
    leg id and a geometric side ('+' = left of the stored leg direction).
    The input mesh is kept as .uncut for solves that need the closed domain.
    """
    if not mesh.cut_chains:
        raise MeshError("mesh has no embedded cuts")
    if mesh.is_cut:
        raise MeshError("cuts already opened")
    tris = mesh.triangles.astype(np.int64).copy()
    npts = mesh.n_nodes
    cut_edge_leg = {}
    for leg, chain in mesh.cut_chains.items():
        for a, b in zip(chain[:-1], chain[1:]):
            cut_edge_leg[(min(a, b) * npts + max(a, b))] = leg

    # (triangle, local edge) provenance for boundary tags
    emap = {}
    for le, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        lo = np.minimum(tris[:, i], tris[:, j])
        hi = np.maximum(tris[:, i], tris[:, j])
        code = lo * npts + hi
        for t in range(len(tris)):
            emap.setdefault(int(code[t]), []).append((t, le))
    tag_by_tri_edge = {}
    for ei, (a, b) in enumerate(mesh.edge_nodes):
        code = int(min(a, b)) * npts + int(max(a, b))
        (t, le), = emap[code]
        tag_by_tri_edge[(t, le)] = (mesh.edge_tags[ei], mesh.edge_geom[ei])
    for code, leg in cut_edge_leg.items():
        pair = emap.get(code, [])
        if len(pair) != 2:
            raise MeshError("cut edge is not interior")
        chain = mesh.cut_chains[leg]
        a, b = None, None
        for x, y in zip(chain[:-1], chain[1:]):
            if min(x, y) * npts + max(x, y) == code:
                a, b = int(x), int(y)
                break
        for (t, le) in pair:
            ta, tb = int(tris[t, le]), int(tris[t, (le + 1) % 3])
            side = "+" if (ta, tb) == (a, b) else "-"
            tag_by_tri_edge[(t, le)] = (EdgeTag("cut", leg, side=side), None)

    # node -> incident triangles
    incident = {}
    for t in range(len(tris)):
        for v in tris[t]:
            incident.setdefault(int(v), []).append(t)

    cut_nodes = sorted({int(v) for leg in mesh.cut_chains
                        for v in mesh.cut_chains[leg]})
    new_coords = [c for c in mesh.nodes]
    for v in cut_nodes:
        fan = incident[v]
        # adjacency inside the fan: share a non-cut edge through v
        adj = {t: [] for t in fan}
        byedge = {}
        for t in fan:
            tri = tris[t]
            k = list(tri).index(v)
            for w in (tri[(k + 1) % 3], tri[(k + 2) % 3]):
                code = min(v, int(w)) * npts + max(v, int(w))
                if code in cut_edge_leg:
                    continue
                byedge.setdefault(code, []).append(t)
        for code, ts in byedge.items():
            if len(ts) == 2:
                adj[ts[0]].append(ts[1])
                adj[ts[1]].append(ts[0])
        comps = []
        seen = set()
        for t in sorted(fan):
            if t in seen:
                continue
            comp = [t]
            seen.add(t)
            stack = [t]
            while stack:
                u = stack.pop()
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        comp.append(w)
                        stack.append(w)
            comps.append(sorted(comp))
        comps.sort(key=lambda c: c[0])
        for ci, comp in enumerate(comps):
            if ci == 0:
                continue
            nid = len(new_coords)
            new_coords.append(mesh.nodes[v].copy())
            for t in comp:
                tri = tris[t]
                tri[list(tri).index(v)] = nid

    nodes = np.asarray(new_coords)
    nn = len(nodes)
    # rebuild boundary records from (triangle, local edge) tags
    edge_nodes = []
    edge_tags = []
    edge_geom = []
    cut_sides = {}
    counts = {}
    for i, j in ((0, 1), (1, 2), (2, 0)):
        lo = np.minimum(tris[:, i], tris[:, j])
        hi = np.maximum(tris[:, i], tris[:, j])
        for c in (lo * nn + hi).tolist():
            counts[c] = counts.get(c, 0) + 1
    for (t, le), (tag, gm) in sorted(tag_by_tri_edge.items()):
        a = int(tris[t, le])
        b = int(tris[t, (le + 1) % 3])
        code = min(a, b) * nn + max(a, b)
        if counts[code] != 1:
            raise MeshError("tagged edge is not boundary after opening")
        edge_nodes.append((a, b))
        edge_tags.append(tag)
        edge_geom.append(gm)
        if tag.kind == "cut":
            cut_sides.setdefault((tag.name, tag.side), []).append((a, b))

    side_chains = {}
    for key, pairs in cut_sides.items():
        nxt = dict(pairs)
        starts = set(nxt) - set(nxt.values())
        if len(starts) != 1:
            raise MeshError("cut side is not a simple path")
        s = starts.pop()
        chain = [s]
        while s in nxt:
            s = nxt[s]
            chain.append(s)
        if key[1] == "-":
            chain.reverse()     # store both sides in leg direction
        side_chains[key] = np.asarray(chain, dtype=np.int32)

    out = Mesh(nodes, tris.astype(np.int32), np.asarray(edge_nodes),
               edge_tags, edge_geom, loop_chains={}, cut_chains={},
               spec=mesh.spec, h=mesh.h, rules=mesh.rules, is_cut=True,
               cut_sides=side_chains, marked_nodes=mesh.marked_nodes,
               uncut=mesh)
    _check_mesh(out)
    return out


def embed_polyline(spec, h, polylines, rules=None, fixed_points=None,
                   min_angle=20.0):
    """Mesh with the given cut polylines embedded and opened.

    Returns the opened (conjugate-domain) mesh; the conforming closed mesh
    is available as .uncut.
    """
    m = triangulate(spec, h, rules=rules, embed=polylines,
                    fixed_points=fixed_points, min_angle=min_angle)
    return open_cuts(m)


# ---------------------------------------------------------------------------
# uniform refinement


def refine_uniform(mesh, project=True):
    """Split each triangle in four; boundary midpoints return to the curve
    when project=True (set False for strictly nested refinement)."""
    if mesh.is_cut:
        raise MeshError("refine before opening cuts")
    nodes = [c for c in mesh.nodes]
    npts0 = mesh.n_nodes
    bgeom = {}
    for ei, (a, b) in enumerate(mesh.edge_nodes):
        bgeom[(min(int(a), int(b)), max(int(a), int(b)))] = ei
    cutcodes = {}
    for leg, chain in mesh.cut_chains.items():
        for a, b in zip(chain[:-1], chain[1:]):
            cutcodes[(min(int(a), int(b)), max(int(a), int(b)))] = leg

    mid_of = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key in mid_of:
            return mid_of[key]
        if project and key in bgeom and mesh.edge_geom[bgeom[key]] is not None:
            li, ki, ta, tb = mesh.edge_geom[bgeom[key]]
            seg = mesh.spec.loops[li].segments[ki]
            xy = seg.point(0.5 * (ta + tb))
        else:
            xy = 0.5 * (mesh.nodes[a] + mesh.nodes[b])
        nodes.append(np.asarray(xy, float))
        mid_of[key] = len(nodes) - 1
        return mid_of[key]

    tris = []
    for (a, b, c) in mesh.triangles:
        a, b, c = int(a), int(b), int(c)
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        tris += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]

    edge_nodes = []
    edge_tags = []
    edge_geom = []
    for ei, (a, b) in enumerate(mesh.edge_nodes):
        a, b = int(a), int(b)
        m = mid_of[(min(a, b), max(a, b))]
        gm = mesh.edge_geom[ei]
        if gm is not None:
            li, ki, ta, tb = gm
            g1, g2 = (li, ki, ta, 0.5 * (ta + tb)), (li, ki, 0.5 * (ta + tb), tb)
        else:
            g1 = g2 = None
        tag = mesh.edge_tags[ei]
        edge_nodes += [(a, m), (m, b)]
        edge_tags += [tag, tag]
        edge_geom += [g1, g2]

    loop_chains = {}
    for tag, chain in mesh.loop_chains.items():
        out = []
        ch = list(chain)
        for i in range(len(ch)):
            a, b = int(ch[i]), int(ch[(i + 1) % len(ch)])
            out += [a, mid_of[(min(a, b), max(a, b))]]
        loop_chains[tag] = np.asarray(out, dtype=np.int32)
    cut_chains = {}
    for leg, chain in mesh.cut_chains.items():
        out = [int(chain[0])]
        for a, b in zip(chain[:-1], chain[1:]):
            a, b = int(a), int(b)
            out += [mid_of[(min(a, b), max(a, b))], b]
        cut_chains[leg] = out

    out = Mesh(np.asarray(nodes), np.asarray(tris, dtype=np.int32),
               np.asarray(edge_nodes), edge_tags, edge_geom, loop_chains,
               cut_chains, spec=mesh.spec, h=(mesh.h or 0) / 2.0,
               rules=mesh.rules, marked_nodes=mesh.marked_nodes)
    # orientation can flip only if projection moved a midpoint drastically
    areas = out.triangle_areas()
    if (areas <= 0).any():
        raise MeshError("refinement produced an inverted triangle")
    _check_mesh(out)
    return out


# ---------------------------------------------------------------------------
# text serialization


def save_mesh_text(mesh, path):
    """Plain-text mesh: node, triangle, and tagged boundary-edge tables."""
    with open(path, "w") as f:
        f.write("conjmap-mesh 1\n")
        f.write(f"nodes {mesh.n_nodes}\n")
        for i, (x, y) in enumerate(mesh.nodes):
            f.write(f"{i} {x:.17g} {y:.17g}\n")
        f.write(f"triangles {mesh.n_triangles}\n")
        for i, (a, b, c) in enumerate(mesh.triangles):
            f.write(f"{i} {a} {b} {c}\n")
        f.write(f"boundary_edges {len(mesh.edge_nodes)}\n")
        for (a, b), t in zip(mesh.edge_nodes, mesh.edge_tags):
            side = t.side or "-"
            sub = t.subarc if t.subarc is not None else "-"
            f.write(f"{a} {b} {t.kind} {t.name} {side} {sub}\n")


def load_mesh_text(path):
    """Inverse of save_mesh_text (geometry provenance is not preserved)."""
    with open(path) as f:
        header = f.readline().split()
        if header[:1] != ["conjmap-mesh"]:
            raise ValueError("not a conjmap mesh file")
        kind, n = f.readline().split()
        assert kind == "nodes"
        nodes = np.empty((int(n), 2))
        for _ in range(int(n)):
            i, x, y = f.readline().split()
            nodes[int(i)] = (float(x), float(y))
        kind, t = f.readline().split()
        assert kind == "triangles"
        tris = np.empty((int(t), 3), dtype=np.int32)
        for _ in range(int(t)):
            i, a, b, c = f.readline().split()
            tris[int(i)] = (int(a), int(b), int(c))
        kind, ne = f.readline().split()
        assert kind == "boundary_edges"
        edge_nodes = []
        edge_tags = []
        for _ in range(int(ne)):
            a, b, kd, name, side, sub = f.readline().split()
            edge_nodes.append((int(a), int(b)))
            edge_tags.append(EdgeTag(kd, name,
                                     side=None if side == "-" else side,
                                     subarc=None if sub == "-" else int(sub)))
    return Mesh(nodes, tris, np.asarray(edge_nodes), edge_tags,
                [None] * len(edge_nodes), {}, {},
                is_cut=any(t.kind == "cut" for t in edge_tags))
