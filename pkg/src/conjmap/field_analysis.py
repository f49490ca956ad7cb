"""Reading the structure of a solved potential.

Level curves, boundary-to-boundary fluxes, stationary points with their
sector structure, and steepest ascent/descent paths. Everything here works
on a PotentialField; nothing assembles or solves.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree

from ._geomutil import polygon_signed_area, points_in_polygon
from .elements import lattice_subtriangles
from .laplace import SolveError

__all__ = [
    "Saddle",
    "GradientTrace",
    "HoleFlux",
    "gradient_scale",
    "find_saddles",
    "classify_stationary_point",
    "trace_gradient",
    "extract_contours",
    "flux_integral",
    "hole_flux_decomposition",
    "cut_start_bisection",
]


@dataclass
class Saddle:
    """Interior stationary point with 2(multiplicity+1) alternating sectors."""

    point: np.ndarray
    value: float
    multiplicity: int
    ascent_dirs: np.ndarray    # (k, 2) unit directions of increasing u
    descent_dirs: np.ndarray   # (k, 2)
    grad_norm: float
    radius: float              # circle radius used for classification


@dataclass
class GradientTrace:
    points: np.ndarray
    reason: str                # 'boundary', 'saddle', 'stalled', 'max_steps'
    loop: Optional[int] = None
    loop_frac: Optional[float] = None
    saddle_index: Optional[int] = None

    @property
    def end(self):
        return self.points[-1]


@dataclass
class HoleFlux:
    """Flux of one hole split into arcs between cut crossings.

    crossings[i] = (leg key, point, contour position); arcs[i] is the flux
    of the contour arc from crossings[i] to crossings[i+1] (cyclic). With
    no crossings, arcs holds the single total flux.
    """

    hole: int
    level: float
    contour: np.ndarray
    crossings: list
    arcs: list
    total: float


def _lattice_gradients(field):
    """Physical coordinates and gradients at every element lattice node."""
    ref = field.ref
    _, dn = ref.basis_and_grad_at(ref.nodes)
    u = field.values[field.dofmap.tri_dofs]
    gref = np.einsum("lbr,tb->tlr", dn, u)
    det = field._det[:, None]
    e1 = field._e1
    e2 = field._e2
    gx = (e2[:, None, 1] * gref[:, :, 0] - e1[:, None, 1] * gref[:, :, 1]) / det
    gy = (-e2[:, None, 0] * gref[:, :, 0] + e1[:, None, 0] * gref[:, :, 1]) / det
    coords = field.dofmap.dof_coords[field.dofmap.tri_dofs]
    return coords, np.stack([gx, gy], axis=-1)


def gradient_scale(field):
    """Largest gradient magnitude over all element lattice nodes (cached)."""
    if not hasattr(field, "_grad_scale"):
        _, g = _lattice_gradients(field)
        field._grad_scale = float(np.linalg.norm(g, axis=-1).max())
    return field._grad_scale


def classify_stationary_point(field, z, radius, n_angles=96, sign_tol=0.08):
    """Sector structure of u around z on a circle of the given radius.

    Returns (multiplicity, ascent_dirs, descent_dirs); multiplicity is
    k - 1 when u - u(z) alternates sign 2k times around the circle, so a
    regular or extremal point reports multiplicity <= 0.
    """
    th = np.linspace(0.0, 2 * np.pi, n_angles, endpoint=False)
    ring = z + radius * np.column_stack([np.cos(th), np.sin(th)])
    du = field.evaluate(ring) - field.evaluate([z])[0]
    amp = np.abs(du).max()
    if amp == 0.0:
        return 0, np.zeros((0, 2)), np.zeros((0, 2))
    keep = np.abs(du) > sign_tol * amp
    sgn = np.sign(du[keep])
    angs = th[keep]
    if len(sgn) < 4:
        return 0, np.zeros((0, 2)), np.zeros((0, 2))
    flips = int(np.count_nonzero(sgn != np.roll(sgn, 1)))
    if flips % 2 == 1 or flips < 4:
        return flips // 2 - 1, np.zeros((0, 2)), np.zeros((0, 2))
    k = flips // 2
    # one direction per contiguous run: at the extremal sample of the run
    starts = np.nonzero(sgn != np.roll(sgn, 1))[0]
    ups = []
    downs = []
    for si, start in enumerate(starts):
        stop = starts[(si + 1) % len(starts)]
        length = (stop - start) % len(sgn)
        if length == 0:
            length = len(sgn)
        idx = np.arange(start, start + length) % len(sgn)
        vals = du[keep][idx]
        best = idx[int(np.argmax(np.abs(vals)))]
        d = np.array([np.cos(angs[best]), np.sin(angs[best])])
        (ups if sgn[start] > 0 else downs).append(d)
    return k - 1, np.asarray(ups), np.asarray(downs)


def find_saddles(field, grad_rel_tol=1e-3, seed_rel_tol=0.05,
                 merge_radius=None, circle_factor=2.5, n_angles=96):
    """Locate and classify the interior saddle points of the field.

    Low-gradient lattice nodes seed a derivative-free minimization of
    the squared gradient; converged minima are merged by distance and
    classified by their sector structure. Boundary artifacts (corners)
    fail classification and are dropped.

    ``grad_rel_tol`` screens out minimizations that stalled far from a
    stationary point (relative to the peak gradient magnitude); it is
    deliberately loose because the sector classification is what
    validates a candidate, and the discrete gradient at a true saddle
    bottoms out at the field's approximation error, which on coarse
    meshes can exceed a tight threshold.
    """
    gmax = gradient_scale(field)
    coords, grads = _lattice_gradients(field)
    gn = np.linalg.norm(grads, axis=-1)
    sel = gn < seed_rel_tol * gmax
    flat = coords[sel]
    if len(flat) == 0:
        return []
    base = float(np.median(field._tri_edge))

    def objective(x):
        try:
            g = field.gradient_at(x[None, :])[0]
        except SolveError:
            return 1e6
        return float(g @ g) / gmax ** 2

    # greedy cluster of seeds (flattest first), refine each representative
    reps = []
    for i in np.argsort(gn[sel]):
        p = flat[i]
        if all(np.linalg.norm(p - r) > 3 * base for r in reps):
            reps.append(p)
    results = []
    for p in reps:
        res = minimize(objective, p, method="Nelder-Mead",
                       options=dict(xatol=1e-13 * field._scale,
                                    fatol=1e-26, maxiter=600))
        g = np.sqrt(max(res.fun, 0.0)) * gmax
        if g > grad_rel_tol * gmax:
            continue
        results.append((np.asarray(res.x), g))
    if not results:
        return []

    mr = merge_radius if merge_radius is not None else 2.0 * base
    merged = []
    for z, g in sorted(results, key=lambda t: t[1]):
        for grp in merged:
            if np.linalg.norm(z - grp[0][0]) < mr:
                grp.append((z, g))
                break
        else:
            merged.append([(z, g)])

    saddles = []
    for grp in merged:
        zs = np.array([z for z, _ in grp])
        z = zs.mean(axis=0)
        spread = float(np.linalg.norm(zs - z, axis=1).max()) if len(zs) > 1 \
            else 0.0
        try:
            size = float(field.local_size(z[None, :])[0])
            radius = max(circle_factor * size, 3.0 * spread)
            mult, ups, downs = classify_stationary_point(
                field, z, radius, n_angles=n_angles)
        except SolveError:
            continue
        if mult < 1:
            continue
        saddles.append(Saddle(
            point=z,
            value=float(field.evaluate(z[None, :])[0]),
            multiplicity=mult,
            ascent_dirs=ups,
            descent_dirs=downs,
            grad_norm=min(g for _, g in grp),
            radius=radius,
        ))
    saddles.sort(key=lambda s: (s.point[0], s.point[1]))
    return saddles


class _Stalled(Exception):
    pass


def trace_gradient(field, start, mode="descent", first_dir=None,
                   projector=None, saddles=(), saddle_radius=None,
                   step_factor=0.35, max_steps=100_000,
                   u_stop_low=None, u_stop_high=None):
    """Integrate the normalized steepest ascent/descent flow from start.

    The path ends on the domain boundary (bisected to the stopping level
    and projected onto the exact curve when a projector is given), inside
    the capture radius of a listed saddle, or where the gradient vanishes.
    """
    sgn = -1.0 if mode == "descent" else 1.0
    x = np.asarray(start, dtype=float).copy()
    gmax = gradient_scale(field)
    stall = 1e-9 * gmax
    pts = [x.copy()]
    spts = np.array([s.point for s in saddles]) if saddles else None
    srad = saddle_radius if saddle_radius is not None else 0.0

    def velocity(y):
        g = field.gradient_at(y[None, :])[0]
        n = float(np.linalg.norm(g))
        if n < stall:
            raise _Stalled()
        d = sgn * g / n
        return d

    def u_of(y):
        return float(field.evaluate(y[None, :])[0])

    lo = -np.inf if u_stop_low is None else float(u_stop_low)
    hi = np.inf if u_stop_high is None else float(u_stop_high)

    def finish_boundary(y):
        loop = frac = None
        if projector is not None:
            loop, frac, q, dist = projector.nearest(y)
            size = float(field.local_size(pts[-1][None, :])[0])
            if dist > 0.75 * size:
                raise SolveError(
                    f"gradient path ended {dist:.3g} away from any boundary")
            y = q
        pts.append(np.asarray(y, dtype=float))
        return GradientTrace(np.array(pts), "boundary", loop=loop,
                             loop_frac=frac)

    d_prev = None
    if first_dir is not None:
        d_prev = np.asarray(first_dir, dtype=float)
        d_prev = d_prev / np.linalg.norm(d_prev)
    for _ in range(max_steps):
        size = float(field.local_size(x[None, :])[0])
        ds = step_factor * size
        while True:
            try:
                k1 = velocity(x)
                if d_prev is not None and float(k1 @ d_prev) < -0.2:
                    # re-entering along the opposite direction means the
                    # path has hit a boundary or level extremum
                    return finish_boundary(x)
                k2 = velocity(x + 0.5 * ds * k1)
                k3 = velocity(x + 0.5 * ds * k2)
                k4 = velocity(x + ds * k3)
                xn = x + ds / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
                break
            except _Stalled:
                return GradientTrace(np.array(pts), "stalled")
            except SolveError:
                ds *= 0.5
                if ds < 1e-7 * size:
                    return finish_boundary(x)
        un = u_of(xn)
        if un <= lo or un >= hi:
            level = lo if un <= lo else hi
            a, b = x, xn
            ua = u_of(a)
            for _ in range(60):
                m = 0.5 * (a + b)
                um = u_of(m)
                if (um - level) * (ua - level) > 0:
                    a, ua = m, um
                else:
                    b = m
                if np.linalg.norm(b - a) < 1e-14 * field._scale:
                    break
            return finish_boundary(0.5 * (a + b))
        if spts is not None and srad > 0:
            dd = np.linalg.norm(spts - xn, axis=1)
            j = int(np.argmin(dd))
            if dd[j] < srad:
                pts.append(xn)
                return GradientTrace(np.array(pts), "saddle", saddle_index=j)
        d_prev = (xn - x) / max(float(np.linalg.norm(xn - x)), 1e-300)
        x = xn
        pts.append(x.copy())
    return GradientTrace(np.array(pts), "max_steps")


def extract_contours(field, level, project=True, newton_iters=2):
    """Polylines of the level set {u = level} on the element lattice grid.

    Closed contours repeat their first point at the end. With project=True
    the vertices take Newton steps onto the exact discrete level set.
    """
    ref = field.ref
    dm = field.dofmap
    vals = field.values
    rng = float(vals.max() - vals.min())
    sub = lattice_subtriangles(ref.order)
    g = dm.tri_dofs[:, sub]                      # (nt, ns, 3)
    v = vals[g] - level
    v = np.where(v == 0.0, 1e-13 * max(rng, 1e-300), v)

    pairs = ((0, 1), (1, 2), (2, 0))
    cross_pts = {}
    hits = []
    for i, j in pairs:
        gi = g[:, :, i]
        gj = g[:, :, j]
        vi = v[:, :, i]
        vj = v[:, :, j]
        hit = vi * vj < 0
        t = vi[hit] / (vi[hit] - vj[hit])
        pa = dm.dof_coords[gi[hit]]
        pb = dm.dof_coords[gj[hit]]
        pts = pa + t[:, None] * (pb - pa)
        lo = np.minimum(gi[hit], gj[hit])
        hi = np.maximum(gi[hit], gj[hit])
        for key, pt in zip(zip(lo.tolist(), hi.tolist()), pts):
            cross_pts[key] = pt
        hits.append(hit)

    # per subtriangle, join its two crossed edges into one segment
    seg_list = []
    crossed = np.stack(hits, axis=-1)
    n_crossed = crossed.sum(axis=-1)
    idx = np.argwhere(n_crossed == 2)
    for ti, si in idx:
        ks = []
        for e, (i, j) in enumerate(pairs):
            if crossed[ti, si, e]:
                a = int(min(g[ti, si, i], g[ti, si, j]))
                b = int(max(g[ti, si, i], g[ti, si, j]))
                ks.append((a, b))
        seg_list.append((ks[0], ks[1]))

    adj = {}
    for sid, (ka, kb) in enumerate(seg_list):
        adj.setdefault(ka, []).append(sid)
        adj.setdefault(kb, []).append(sid)

    used = np.zeros(len(seg_list), dtype=bool)

    def walk(start_key):
        chain = [start_key]
        key = start_key
        while True:
            nxt = [s for s in adj[key] if not used[s]]
            if not nxt:
                break
            sid = nxt[0]
            used[sid] = True
            ka, kb = seg_list[sid]
            key = kb if ka == key else ka
            chain.append(key)
        return chain

    chains = []
    open_keys = [k for k, ss in adj.items() if len(ss) == 1]
    for k in open_keys:
        if all(used[s] for s in adj[k]):
            continue
        chains.append(walk(k))
    for sid in range(len(seg_list)):
        if not used[sid]:
            used[sid] = True
            ka, kb = seg_list[sid]
            chain = [ka] + walk(kb)
            chains.append(chain)

    out = []
    for chain in chains:
        pts = np.array([cross_pts[k] for k in chain])
        if len(pts) < 2:
            continue
        if project:
            for _ in range(newton_iters):
                try:
                    u = field.evaluate(pts) - level
                    gr = field.gradient_at(pts)
                except SolveError:
                    break
                n2 = np.einsum("ij,ij->i", gr, gr)
                pts = pts - (u / np.maximum(n2, 1e-300))[:, None] * gr
        out.append(pts)
    return out


def flux_integral(field, poly, n_gauss=4):
    """Flux of grad u across a polyline, through its right-hand normal.

    Traversing a closed curve clockwise around a region therefore counts
    flux into that region as positive.
    """
    poly = np.asarray(poly, dtype=float)
    a = poly[:-1]
    b = poly[1:]
    d = b - a
    lens = np.linalg.norm(d, axis=1)
    keep = lens > 0
    a, b, d, lens = a[keep], b[keep], d[keep], lens[keep]
    if len(a) == 0:
        return 0.0
    x, w = np.polynomial.legendre.leggauss(n_gauss)
    t = 0.5 * (x + 1.0)
    pts = (a[:, None, :] + t[None, :, None] * d[:, None, :]).reshape(-1, 2)
    gr = field.gradient_at(pts).reshape(len(a), n_gauss, 2)
    nrm = np.column_stack([d[:, 1], -d[:, 0]]) / lens[:, None]
    gn = np.einsum("sgr,sr->sg", gr, nrm)
    return float(np.einsum("sg,g,s->", gn, 0.5 * w, lens))


def _contour_position(contour, pt, tree):
    """(index, local t) of the contour segment nearest to pt."""
    n = len(contour) - 1
    _, k = tree.query(pt)
    best = None
    for i in (k - 2, k - 1, k, k + 1):
        i %= n
        a = contour[i]
        ab = contour[i + 1] - a
        den = float(ab @ ab)
        t = 0.0 if den == 0 else float(np.clip((pt - a) @ ab / den, 0, 1))
        q = a + t * ab
        dd = float(np.linalg.norm(pt - q))
        if best is None or dd < best[2]:
            best = (i, t, dd)
    return best[0], best[1]


def hole_flux_decomposition(field, spec, legs=None, level=None, saddles=()):
    """Flux of each hole, split into arcs at the crossings of cut legs.

    The splitting contour is the closed level curve around each hole at a
    level above every saddle value, so ascent legs cross it exactly once
    and descent legs not at all. Arcs are traversed clockwise around the
    hole, making each arc flux positive. Crossings and arcs are keyed by
    (leg, end) where end 0/1 is the leg endpoint whose half of the leg
    produced the crossing.
    """
    if level is None:
        top = max((s.value for s in saddles), default=0.0)
        level = 0.5 * (1.0 + top)
    conts = [c for c in extract_contours(field, level)
             if np.linalg.norm(c[0] - c[-1]) < 1e-9 * field._scale]
    if not conts:
        raise SolveError(f"no closed contours at level {level}")

    # candidate crossings of each leg with the level set; the leg half
    # (before or after its u-minimum) identifies which end of the leg the
    # crossing belongs to, so keys are (leg, end) with end in {0, 1}
    candidates = []
    for key, poly in (legs or {}).items():
        poly = np.asarray(poly, dtype=float)
        u = field.evaluate(poly)
        imin = int(np.argmin(u))
        s = np.sign(u - level)
        flip = np.nonzero(s[:-1] * s[1:] < 0)[0]
        for i in flip:
            ua, ub = u[i], u[i + 1]
            t = (level - ua) / (ub - ua)
            pt = poly[i] + t * (poly[i + 1] - poly[i])
            candidates.append(((key, 0 if i < imin else 1), pt))

    from .geometry import discretize_loop
    hole_pts = [discretize_loop(lp, 1e-3 * field._scale).points[0]
                for lp in spec.holes]
    out = []
    for hole, hp in enumerate(hole_pts, start=1):
        ring = None
        for c in conts:
            if points_in_polygon(hp[None, :], c[:-1])[0]:
                ring = c
                break
        if ring is None:
            raise SolveError(f"no contour encloses hole {hole} "
                             f"at level {level}")
        if polygon_signed_area(ring[:-1]) > 0:
            ring = ring[::-1]
        tree = cKDTree(ring[:-1])

        crossings = []
        for key_end, pt in candidates:
            # the crossing belongs to this hole only if it lies on this ring
            seg_i, seg_t = _contour_position(ring, pt, tree)
            q = ring[seg_i] + seg_t * (ring[seg_i + 1] - ring[seg_i])
            size = float(field.local_size(pt[None, :])[0])
            if np.linalg.norm(q - pt) < 0.5 * size:
                crossings.append((key_end, q, seg_i + seg_t))
        crossings.sort(key=lambda c: c[2])

        if not crossings:
            arcs = [(None, None, flux_integral(field, ring))]
        else:
            arcs = []
            for ci in range(len(crossings)):
                ka, pa, sa = crossings[ci]
                kb, pb, sb = crossings[(ci + 1) % len(crossings)]
                arcs.append((ka, kb,
                             _arc_flux(field, ring, sa, sb, pa, pb)))
        total = sum(a[2] for a in arcs)
        out.append(HoleFlux(hole=hole, level=level, contour=ring,
                            crossings=crossings, arcs=arcs, total=total))
    return out


def _arc_flux(field, ring, sa, sb, pa, pb):
    """Flux along the closed ring from position sa forward to sb (cyclic).

    Equal positions mean one full turn around the ring, not an empty arc.
    """
    n = len(ring) - 1
    ia = int(np.floor(sa)) % n
    ib = int(np.floor(sb)) % n
    pts = [pa]
    if not (ia == ib and sb > sa):
        i = ia
        while True:
            i = (i + 1) % n
            pts.append(ring[i])
            if i == ib:
                break
    pts.append(pb)
    return flux_integral(field, np.array(pts))


def cut_start_bisection(field, projector, loop=0, n_scan=48, tol=1e-10,
                        offset_factor=0.4, **trace_kw):
    """Feet of the ascent separatrices on a loop, by attractor bisection.

    Scans the loop by arclength fraction, traces steepest ascent from a
    point just inside the boundary, and bisects every change of reached
    hole. Returns a list of (fraction, point, (hole_a, hole_b)).
    """
    def attractor(t):
        p = projector.point(loop, t)
        q1 = projector.point(loop, t + 1e-7)
        q0 = projector.point(loop, t - 1e-7)
        tan = q1 - q0
        tan /= max(np.linalg.norm(tan), 1e-300)
        nrm = np.array([-tan[1], tan[0]])
        size = float(field.local_size(
            np.asarray(p, dtype=float)[None, :])[0])
        for sign in (1.0, -1.0):
            q = p + sign * offset_factor * size * nrm
            try:
                field.locate(q[None, :], max_violation=-1e-6)
            except SolveError:
                continue
            tr = trace_gradient(field, q, mode="ascent",
                                projector=projector,
                                u_stop_high=1.0 - 1e-12, **trace_kw)
            if tr.reason == "boundary" and tr.loop is not None \
                    and tr.loop != loop:
                return tr.loop
            return None
        return None

    ts = np.linspace(0.0, 1.0, n_scan, endpoint=False)
    ks = [attractor(t) for t in ts]
    feet = []
    for i in range(n_scan):
        ka = ks[i]
        kb = ks[(i + 1) % n_scan]
        if ka is None or kb is None or ka == kb:
            continue
        a = ts[i]
        b = ts[(i + 1) % n_scan] + (1.0 if i + 1 == n_scan else 0.0)
        while b - a > tol:
            m = 0.5 * (a + b)
            km = attractor(m % 1.0)
            if km == ka:
                a = m
            else:
                b = m
        t = 0.5 * (a + b) % 1.0
        feet.append((t, projector.point(loop, t), (ka, kb)))
    return feet
