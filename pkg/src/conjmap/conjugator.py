"""Cutting a multiply connected domain and solving the conjugate problem.

The potential u1 (1 on the holes, 0 on the outer boundary) admits a
harmonic conjugate only after the domain is opened into a simply
connected one. The opening follows the gradient structure of u1: one
connector from a hole to the outer boundary, plus one cut through every
interior saddle joining the boundaries its ascent separatrices reach.
Along the opened boundary the conjugate potential u2 is constant on each
cut side, and the constants are cumulative fluxes collected while walking
the boundary once around. This module builds the cut system, assembles
and validates that walk, assigns the constants, and solves for u2.
"""

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import geometry as geo
from ._geomutil import polyline_min_distance
from .field_analysis import hole_flux_decomposition, trace_gradient
from .laplace import solve_laplace
from .meshing import MeshError

__all__ = [
    "CutError",
    "Cut",
    "CutSet",
    "WalkSegment",
    "ConjugateSpec",
    "build_cuts",
    "assemble_conjugate_boundary",
    "conjugate_jumps",
    "assign_cut_values",
    "solve_conjugate",
    "reciprocal_errors",
]


class CutError(RuntimeError):
    pass


@dataclass(frozen=True)
class Cut:
    """One cut leg: an open polyline meshed into both sides of a slit.

    The connector runs outer -> hole so that its plus side (left of the
    leg direction) is the one that receives the value 0. A generic saddle
    cut runs hole -> saddle -> hole as a single smooth polyline; around a
    degenerate saddle each branch is its own Cut running saddle -> hole.
    loops holds the loop index under each endpoint, None at a saddle end.
    """

    id: str
    polyline: np.ndarray
    loops: tuple
    saddle: Optional[int] = None

    def endpoint(self, end):
        return self.polyline[-1] if end else self.polyline[0]


@dataclass(frozen=True)
class CutSet:
    """All cut legs of one domain; cuts[0] is the outer connector."""

    cuts: tuple
    saddles: tuple = ()

    def polylines(self):
        return {c.id: c.polyline for c in self.cuts}

    def __getitem__(self, cid):
        for c in self.cuts:
            if c.id == cid:
                return c
        raise KeyError(cid)


@dataclass(frozen=True)
class WalkSegment:
    """Maximal run of boundary edges sharing one tag, in walk order.

    kind 'cut': name is the cut id, side '+'/'-'; the walk traverses the
    plus side along the stored leg direction and the minus side against
    it. kind 'loop': name is the loop tag, side is None.
    """

    kind: str
    name: str
    side: Optional[str]
    nodes: np.ndarray

    @property
    def entry_end(self):
        return 0 if self.side == "+" else 1

    @property
    def exit_end(self):
        return 1 if self.side == "+" else 0


@dataclass(frozen=True)
class ConjugateSpec:
    """Oriented boundary walk of the cut domain with Dirichlet data.

    walk starts at the connector's plus side and keeps the domain on the
    left, so hole arcs appear clockwise and the single outer arc last.
    jumps align with the hole arcs of the walk; dirichlet maps
    (cut id, side) to its constant; loop tags stay Neumann.
    """

    walk: tuple
    neumann: tuple
    d: Optional[float] = None
    jumps: Optional[tuple] = None
    dirichlet: Optional[dict] = None

    def hole_arcs(self):
        """Walk indices of the hole arcs (every loop segment but the last)."""
        return [i for i, s in enumerate(self.walk)
                if s.kind == "loop" and i != len(self.walk) - 1]


def _loop_index(tag):
    return int(tag[1:])


def _nudged(point, direction, eps):
    p = np.asarray(point, dtype=float)
    return p + eps * np.asarray(direction, dtype=float)


def build_cuts(field, saddles, spec=None, projector=None, gamma0_start=None,
               offset=1e-7):
    """Trace the cut system of a solved potential.

    The connector starts at gamma0_start (default: the domain's hint,
    else the point of hole 1 nearest the outer boundary) and follows the
    steepest descent to the outer boundary. Every saddle contributes the
    joined pair of its ascent separatrices; degenerate saddles contribute
    one leg per ascent direction instead.
    """
    if spec is None:
        spec = field.mesh.spec
    if projector is None:
        projector = geo.BoundaryProjector(spec)
    scale = projector.scale
    eps = offset * scale

    if gamma0_start is None:
        gamma0_start = spec.gamma0_hint
    if gamma0_start is None:
        gamma0_start = _closest_escape(projector)
    p0 = np.asarray(gamma0_start, dtype=float)
    loop0, _, p0, dist = projector.nearest(p0)
    if loop0 == 0:
        raise CutError("connector start lies on the outer boundary")

    g = field.gradient_at(p0[None, :])[0]
    gn = np.linalg.norm(g)
    if gn == 0:
        raise CutError("zero gradient at the connector start")
    tr = trace_gradient(field, _nudged(p0, -g / gn, eps),
                        mode="descent", projector=projector)
    if tr.reason != "boundary" or tr.loop != 0:
        raise CutError(f"connector trace ended by {tr.reason!r} "
                       f"on loop {tr.loop}; move the start point")
    poly = np.vstack([p0[None, :], tr.points])[::-1]
    cuts = [Cut(id="g0", polyline=poly, loops=(0, loop0))]

    for k, s in enumerate(saddles):
        branches = []
        for dvec in s.ascent_dirs:
            # start on the classification circle: inside it the gradient
            # (~ r^multiplicity) drowns in FE noise at a degenerate saddle
            t = trace_gradient(field, _nudged(s.point, dvec, s.radius),
                               mode="ascent", first_dir=dvec,
                               projector=projector)
            if t.reason != "boundary" or t.loop == 0:
                raise CutError(f"ascent from saddle {k} ended by "
                               f"{t.reason!r} on loop {t.loop}")
            branches.append((t.loop, t.points))
        if len(branches) == 2:
            (la, pa), (lb, pb) = branches
            joined = np.vstack([pa[::-1], s.point[None, :], pb])
            cuts.append(Cut(id=f"s{k}", polyline=joined, loops=(la, lb),
                            saddle=k))
        else:
            for j, (lj, pj) in enumerate(branches):
                leg = np.vstack([s.point[None, :], pj])
                cuts.append(Cut(id=f"s{k}{chr(97 + j)}", polyline=leg,
                                loops=(None, lj), saddle=k))

    _validate_cuts(cuts, projector, scale)
    return CutSet(cuts=tuple(cuts), saddles=tuple(saddles))


def _closest_escape(projector, n=256):
    """Point of hole 1 nearest the outer boundary."""
    fr = np.arange(n) / n
    pts = np.array([projector.point(1, f) for f in fr])
    d = np.array([projector.nearest(p, loop=0)[3] for p in pts])
    return pts[int(np.argmin(d))]


def _validate_cuts(cuts, projector, scale):
    tol = 1e-8 * scale
    for c in cuts:
        for end in (0, 1):
            want = c.loops[end]
            if want is None:
                continue
            loop, _, _, dist = projector.nearest(c.endpoint(end), loop=want)
            if dist > tol:
                raise CutError(f"cut {c.id} endpoint {end} misses loop "
                               f"{want} by {dist:.2e}")
        if len(c.polyline) > 6:
            body = c.polyline[3:-3]
            for li in range(projector.n_loops):
                d = polyline_min_distance(body, projector.polyline(li),
                                          closed_a=False)
                if d < tol:
                    raise CutError(f"cut {c.id} touches loop {li} "
                                   f"away from its endpoints")
    for i in range(len(cuts)):
        for j in range(i + 1, len(cuts)):
            a, b = cuts[i], cuts[j]
            shared = a.saddle is not None and a.saddle == b.saddle
            if shared:
                continue
            d = polyline_min_distance(a.polyline, b.polyline,
                                      closed_a=False, closed_b=False)
            if d < tol:
                raise CutError(f"cuts {a.id} and {b.id} intersect")


def assemble_conjugate_boundary(cutmesh, cutset):
    """Walk the opened mesh boundary into an alternating segment sequence.

    The mesh must expose exactly one boundary cycle. Segments are grouped
    by edge tag, rotated so the connector's plus side leads, and checked:
    every cut id appears once per side and the outer boundary forms a
    single arc at the end of the walk.
    """
    cycles = cutmesh.boundary_cycles()
    if len(cycles) != 1:
        raise CutError(f"cut domain has {len(cycles)} boundary cycles, "
                       "expected 1")
    if cutmesh.euler_characteristic() != 1:
        raise CutError("cut domain is not simply connected")
    cyc = cycles[0]

    tag_of = {}
    for ei, (a, b) in enumerate(cutmesh.edge_nodes):
        tag_of[(int(a), int(b))] = cutmesh.edge_tags[ei]

    n = len(cyc)
    edges = [(cyc[i], cyc[(i + 1) % n]) for i in range(n)]
    keys = []
    for e in edges:
        t = tag_of.get(e)
        if t is None:
            raise CutError(f"boundary edge {e} has no tag")
        keys.append((t.kind, t.name, t.side))

    # rotate the edge list so a fresh segment starts at position 0
    for start in range(n):
        if keys[start] != keys[start - 1]:
            break
    edges = edges[start:] + edges[:start]
    keys = keys[start:] + keys[:start]

    segments = []
    i = 0
    while i < n:
        j = i
        nodes = [edges[i][0]]
        while j < n and keys[j] == keys[i]:
            nodes.append(edges[j][1])
            j += 1
        kind, name, side = keys[i]
        segments.append(WalkSegment(kind=kind, name=name, side=side,
                                    nodes=np.asarray(nodes, dtype=np.int64)))
        i = j

    g0 = cutset.cuts[0].id
    lead = [i for i, s in enumerate(segments)
            if s.kind == "cut" and s.name == g0 and s.side == "+"]
    if len(lead) != 1:
        raise CutError(f"connector plus side appears {len(lead)} times "
                       "in the walk")
    k = lead[0]
    segments = segments[k:] + segments[:k]

    seen = {}
    for s in segments:
        if s.kind == "cut":
            seen.setdefault(s.name, []).append(s.side)
    for c in cutset.cuts:
        if sorted(seen.get(c.id, [])) != ["+", "-"]:
            raise CutError(f"cut {c.id} sides in walk: "
                           f"{seen.get(c.id)}; expected one of each")
    last = segments[-1]
    if not (last.kind == "loop" and _loop_index(last.name) == 0):
        raise CutError("walk does not end with the outer boundary arc")
    outer_arcs = [s for s in segments
                  if s.kind == "loop" and _loop_index(s.name) == 0]
    if len(outer_arcs) != 1:
        raise CutError(f"outer boundary split into {len(outer_arcs)} arcs")

    neumann = tuple(sorted({s.name for s in segments if s.kind == "loop"}))
    return ConjugateSpec(walk=tuple(segments), neumann=neumann)


def conjugate_jumps(field, conj, cutmesh, cutset=None, level=None):
    """Flux increment of every hole arc of the walk, in walk order.

    Uses the embedded cut chains of the closed mesh so the crossings
    match the meshed legs exactly; field must live on that closed mesh.
    The contour level is placed above every saddle value of cutset so
    each hole keeps its own contour ring.
    """
    base = cutmesh.uncut if cutmesh.is_cut else cutmesh
    legs = {leg: base.nodes[chain]
            for leg, chain in base.cut_chains.items()}
    spec = base.spec
    saddles = cutset.saddles if cutset is not None else ()
    decs = hole_flux_decomposition(field, spec, legs=legs, level=level,
                                   saddles=saddles)

    arcflux = {}
    for hf in decs:
        for ka, kb, fl in hf.arcs:
            if ka is None:
                raise CutError(f"hole {hf.hole} has no cut crossing")
            if (hf.hole, ka, kb) in arcflux:
                raise CutError(f"ambiguous arc {ka} -> {kb} on hole "
                               f"{hf.hole}")
            arcflux[(hf.hole, ka, kb)] = fl

    walk = conj.walk
    jumps = []
    for i in conj.hole_arcs():
        seg = walk[i]
        prev = walk[i - 1]
        nxt = walk[(i + 1) % len(walk)]
        if prev.kind != "cut" or nxt.kind != "cut":
            raise CutError("hole arc not bounded by cut sides")
        ka = (prev.name, prev.exit_end)
        kb = (nxt.name, nxt.entry_end)
        hole = _loop_index(seg.name)
        try:
            jumps.append(arcflux[(hole, ka, kb)])
        except KeyError:
            raise CutError(f"no flux arc {ka} -> {kb} on hole {hole}; "
                           f"have {sorted(k for k in arcflux if k[0] == hole)}")
    return jumps, decs


def assign_cut_values(conj, jumps, d=None):
    """Fill the walk's Dirichlet constants from the ordered jumps.

    The connector's plus side gets 0 and every later cut side gets the
    cumulative sum reached at its position; the final value must reach d.
    """
    arcs = set(conj.hole_arcs())
    jumps = [float(j) for j in jumps]
    if len(jumps) != len(arcs):
        raise ValueError(f"{len(jumps)} jumps for {len(arcs)} hole arcs")
    if any(j < 0 for j in jumps):
        raise ValueError("negative jump")
    total = sum(jumps)
    if total <= 0:
        raise ValueError("jumps sum to zero")
    if d is None:
        d = total
    elif abs(total - d) > 1e-6 * abs(d):
        raise ValueError(f"jumps sum to {total!r}, given d={d!r}")
    else:
        # absorb the tiny discrepancy so the walk ends exactly at d
        jumps = [j * (d / total) for j in jumps]

    values = {}
    cum = 0.0
    jit = iter(jumps)
    for i, seg in enumerate(conj.walk):
        if seg.kind == "cut":
            values[(seg.name, seg.side)] = cum
        elif i in arcs:
            cum += next(jit)
    return replace(conj, d=float(d), jumps=tuple(jumps), dirichlet=values)


def solve_conjugate(conj, cutmesh, order=3, normalized=False):
    """Solve for the conjugate potential on the opened mesh.

    Dirichlet on every cut side with the assigned constant (divided by d
    when normalized); all loop arcs keep the natural zero-flux condition.
    """
    if conj.dirichlet is None:
        raise ValueError("cut values not assigned yet")
    if not cutmesh.is_cut:
        raise MeshError("conjugate solve needs the opened mesh")
    scale = 1.0 / conj.d if normalized else 1.0
    bc = {key: v * scale for key, v in conj.dirichlet.items()}
    return solve_laplace(cutmesh, bc, order=order)


def reciprocal_errors(m, m_tilde):
    """Reciprocal identity errors of a modulus pair.

    Returns (e_d, e_n, order): the ratio error |1 - m/m_tilde| for a pair
    expected equal, the product error |1 - m*m_tilde| for a pair expected
    reciprocal, and the error order |ceil(log10 e)| of whichever of the
    two the pair satisfies better.
    """
    if not (m > 0 and m_tilde > 0):
        raise ValueError("moduli must be positive")
    e_d = abs(1.0 - m / m_tilde)
    e_n = abs(1.0 - m * m_tilde)
    e = min(e_d, e_n)
    order = math.inf if e == 0 else abs(math.ceil(math.log10(e)))
    return e_d, e_n, order
