"""End-to-end construction of canonical conformal maps, with reporting.

Three entry points cover the connectivity cases: run_simply_connected
maps a quadrilateral (a Jordan domain with four marked boundary points)
onto a rectangle, run_ring maps a doubly connected domain onto an
annulus, and run_multiply_connected maps a domain with two or more holes
onto the annulus with concentric slits. All three return the same pair:
the evaluable ConformalMap and a RunReport with capacities, jumps,
reciprocal errors, solver statistics, and timings.

The cut-based cases run a tolerance-driven outer loop: when the
reciprocal error target is missed, the saddle and boundary tolerances
shrink, the mesh is refined around the found saddles, and the pass is
repeated up to a bounded number of iterations, keeping the best iterate.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .conjugator import (CutError, assemble_conjugate_boundary,
                         assign_cut_values, build_cuts, conjugate_jumps,
                         reciprocal_errors, solve_conjugate)
from .field_analysis import find_saddles, gradient_scale
from .laplace import SolveError, solve_laplace
from .mapper import ConformalMap
from .meshing import MeshError, RefinementRule, default_rules, embed_polyline, triangulate


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class Tolerances:
    """Tolerance budget of one pipeline run.

    modulus: relative capacity change between outer iterations below
        which further refinement is considered stalled.
    saddle_gradient: quality target for the gradient norm at located
        saddles, relative to the maximum gradient over a probe lattice.
        Saddles are validated structurally (by sector classification),
        so exceeding this target records a warning rather than failing
        the run: the discrete gradient at a true saddle bottoms out at
        the approximation error of the mesh at hand.
    boundary_param: boundary-parameter tolerance seeding the cut traces;
        trace endpoints themselves are projected onto the exact curves.
    reciprocal: target reciprocal-identity error; the outer loop stops
        once the normalized error is at or below it.
    shrink: factor applied to saddle_gradient and boundary_param on
        every additional outer iteration.
    max_outer: outer iteration bound; the best iterate is returned when
        the target is never met.
    """

    modulus: float = 1e-6
    saddle_gradient: float = 1e-6
    boundary_param: float = 1e-8
    reciprocal: float = 1e-3
    shrink: float = 0.1
    max_outer: int = 3

    def __post_init__(self):
        for name in ("modulus", "saddle_gradient", "boundary_param",
                     "reciprocal"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.shrink < 1.0:
            raise ValueError("shrink must lie in (0, 1)")
        if self.max_outer < 1:
            raise ValueError("max_outer must be at least 1")


@dataclass(frozen=True)
class RunReport:
    """Numbers and diagnostics of one completed pipeline run."""

    name: str
    kind: str                      # rectangle | annulus | annulus-with-slits
    n_holes: int
    fem_order: int
    capacity: float                # d: total flux = Dirichlet energy
    modulus: float                 # M for a quadrilateral, else 2*pi/d
    energy: float                  # Dirichlet energy of the potential
    jumps: tuple
    saddles: tuple                 # (x, y, value, multiplicity) rows
    walk: tuple                    # (kind, label, value-or-None) rows
    e_r_d: float
    e_r_n: float
    order_d: float
    order_n: float
    dofs: int
    mesh_nodes: int
    mesh_triangles: int
    moduli_dof: int
    iterations: int
    solves: tuple                  # (label, dofs, residual, energy) rows
    timings: dict = field(default_factory=dict)
    warnings: tuple = ()
    tolerances: Tolerances = field(default_factory=Tolerances)

    def to_text(self, include_timings=False):
        """Human-readable report; numbers carry 12 significant digits."""
        g = _fmt12
        lines = [
            "conformal map report",
            "====================",
            f"domain             {self.name}",
            f"canonical image    {self.kind}",
            f"holes              {self.n_holes}",
            f"fem order          {self.fem_order}",
            f"mesh               {self.mesh_nodes} nodes, "
            f"{self.mesh_triangles} triangles, {self.dofs} dofs",
            f"capacity d         {g(self.capacity)}",
            f"modulus            {g(self.modulus)}"
            + ("" if self.kind == "rectangle" else "   (2*pi/d)"),
            f"energy             {g(self.energy)}",
            f"moduli dof         {self.moduli_dof}",
            f"iterations         {self.iterations}",
        ]
        if self.jumps:
            lines.append("jumps              "
                         + "  ".join(g(j) for j in self.jumps))
        for k, (x, y, v, mult) in enumerate(self.saddles):
            lines.append(f"saddle {k}           ({g(x)}, {g(y)})  "
                         f"u = {g(v)}  multiplicity {mult}")
        if self.walk:
            lines.append("conjugate boundary walk:")
            for kind, label, value in self.walk:
                rhs = "neumann" if value is None else g(value)
                lines.append(f"  {kind:<5} {label:<6} {rhs}")
        lines += [
            f"reciprocal e_r^d   {g(self.e_r_d)}   (order {self.order_d})",
            f"reciprocal e_r^n   {g(self.e_r_n)}   (order {self.order_n})",
            "solves:",
        ]
        for label, dofs, residual, energy in self.solves:
            lines.append(f"  {label:<12} dofs {dofs:<8} residual "
                         f"{residual:.3e}  energy {g(energy)}")
        if include_timings and self.timings:
            lines.append("timings (s):")
            for stage, sec in self.timings.items():
                lines.append(f"  {stage:<12} {sec:.3f}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"

    def to_tsv(self):
        """Machine-readable key/value table, one row per datum."""
        g = _fmt12
        rows = [
            ("name", self.name),
            ("kind", self.kind),
            ("n_holes", str(self.n_holes)),
            ("fem_order", str(self.fem_order)),
            ("capacity", g(self.capacity)),
            ("modulus", g(self.modulus)),
            ("energy", g(self.energy)),
            ("jumps", ";".join(g(j) for j in self.jumps)),
            ("e_r_d", g(self.e_r_d)),
            ("e_r_n", g(self.e_r_n)),
            ("order_d", str(self.order_d)),
            ("order_n", str(self.order_n)),
            ("dofs", str(self.dofs)),
            ("mesh_nodes", str(self.mesh_nodes)),
            ("mesh_triangles", str(self.mesh_triangles)),
            ("moduli_dof", str(self.moduli_dof)),
            ("iterations", str(self.iterations)),
        ]
        for k, (x, y, v, mult) in enumerate(self.saddles):
            rows.append((f"saddle.{k}", f"{g(x)};{g(y)};{g(v)};{mult}"))
        for k, (kind, label, value) in enumerate(self.walk):
            rhs = "neumann" if value is None else g(value)
            rows.append((f"walk.{k}", f"{kind};{label};{rhs}"))
        for label, dofs, residual, energy in self.solves:
            rows.append((f"solve.{label}",
                         f"{dofs};{residual:.3e};{g(energy)}"))
        for w in self.warnings:
            rows.append(("warning", w))
        return "\n".join(f"{k}\t{v}" for k, v in rows) + "\n"


@dataclass(frozen=True)
class SweepRow:
    level: float                   # the h or p value of this ladder rung
    capacity: float
    e_r_d: float
    e_r_n: float
    error_order: float
    dofs: int


@dataclass(frozen=True)
class SweepResult:
    kind: str                      # 'h' or 'p'
    rows: tuple

    def to_table(self):
        g = _fmt12
        out = [f"{self.kind}\tcapacity\te_r_d\te_r_n\torder\tdofs"]
        for r in self.rows:
            lv = f"{r.level:g}"
            out.append(f"{lv}\t{g(r.capacity)}\t{g(r.e_r_d)}\t{g(r.e_r_n)}"
                       f"\t{r.error_order}\t{r.dofs}")
        return "\n".join(out) + "\n"


def _fmt12(x):
    if x is None:
        return "-"
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return f"{x:.12g}"


class _Timer:
    def __init__(self):
        self.stages = {}

    @contextmanager
    def __call__(self, stage):
        t0 = time.perf_counter()
        yield
        self.stages[stage] = (self.stages.get(stage, 0.0)
                              + time.perf_counter() - t0)


def _hole_bc(n_holes):
    bc = {"E0": 0.0}
    for j in range(1, n_holes + 1):
        bc[f"E{j}"] = 1.0
    return bc


def _default_h(spec, h):
    if h is not None:
        return float(h)
    hinted = (spec.hints or {}).get("h")
    if hinted is not None:
        return float(hinted)
    return geo.BoundaryProjector(spec).scale / 20.0


def _walk_rows(conj):
    rows = []
    for seg in conj.walk:
        if seg.kind == "cut":
            value = None
            if conj.dirichlet is not None:
                value = conj.dirichlet.get((seg.name, seg.side))
            rows.append(("cut", f"{seg.name}{seg.side}", value))
        else:
            rows.append(("loop", seg.name, None))
    return tuple(rows)


def _saddle_rows(field1, saddles):
    rows = []
    for s in saddles:
        val = float(field1.evaluate(np.asarray(s.point, dtype=float)[None, :])[0])
        rows.append((float(s.point[0]), float(s.point[1]), val,
                     int(s.multiplicity)))
    return tuple(rows)


def _cut_pass(spec, h, order, eps2, eps3, rules, projector, tm):
    """One mesh/solve/cut/conjugate pass; returns the assembled pieces."""
    m = len(spec.holes)
    bc = _hole_bc(m)
    with tm("mesh"):
        mesh = triangulate(spec, h, rules=rules)
    with tm("potential"):
        f0 = solve_laplace(mesh, bc, order=order)
    with tm("saddles"):
        saddles = find_saddles(f0)
    mult = sum(s.multiplicity for s in saddles)
    if mult != m - 1:
        raise PipelineError(
            f"saddle search found total multiplicity {mult}, expected {m - 1}")
    gmax = gradient_scale(f0)
    grad_rel = max((s.grad_norm for s in saddles), default=0.0) / gmax
    with tm("cuts"):
        cutset = build_cuts(f0, saddles, spec=spec, projector=projector,
                            offset=max(eps3, 1e-12))
    with tm("embed"):
        cm = embed_polyline(spec, h, cutset.polylines(), rules=rules)
    with tm("potential"):
        f1 = solve_laplace(cm.uncut, bc, order=order)
    with tm("jumps"):
        conj = assemble_conjugate_boundary(cm, cutset)
        jumps, _ = conjugate_jumps(f1, conj, cm, cutset=cutset)
        conj = assign_cut_values(conj, list(jumps))
    with tm("conjugate"):
        f2 = solve_conjugate(conj, cm, order=order, normalized=True)
    d = conj.d
    e2n = f2.energy()
    e_r_d, _, order_d = reciprocal_errors(d, e2n * d * d)
    _, e_r_n, order_n = reciprocal_errors(d, e2n)
    return {
        "mesh": cm, "f1": f1, "f2": f2, "saddles": saddles,
        "cutset": cutset, "conj": conj, "jumps": tuple(jumps), "d": d,
        "e_r_d": e_r_d, "e_r_n": e_r_n, "order_d": order_d,
        "order_n": order_n, "h": h, "saddle_grad_rel": grad_rel,
    }


def _finish_cut_run(spec, best, order, kind, iterations, tm, warnings, tol):
    f1, f2 = best["f1"], best["f2"]
    cutset, conj = best["cutset"], best["conj"]
    sv = tuple(row[2] for row in _saddle_rows(f1, cutset.saddles))
    cmap = ConformalMap(u1=f1, u2=f2, d=best["d"], cuts=cutset, conj=conj,
                        saddle_values=sv)
    m = len(spec.holes)
    mesh = best["mesh"]
    report = RunReport(
        name=spec.name or "custom",
        kind=kind,
        n_holes=m,
        fem_order=order,
        capacity=best["d"],
        modulus=2.0 * math.pi / best["d"],
        energy=f1.energy(),
        jumps=best["jumps"],
        saddles=_saddle_rows(f1, cutset.saddles),
        walk=_walk_rows(conj),
        e_r_d=best["e_r_d"],
        e_r_n=best["e_r_n"],
        order_d=best["order_d"],
        order_n=best["order_n"],
        dofs=f1.dofmap.n_dofs,
        mesh_nodes=mesh.n_nodes,
        mesh_triangles=mesh.n_triangles,
        moduli_dof=3 * m - 3 if m >= 2 else 1,
        iterations=iterations,
        solves=(
            ("potential", f1.dofmap.n_dofs, f1.residual, f1.energy()),
            ("conjugate", f2.dofmap.n_dofs, f2.residual, f2.energy()),
        ),
        timings=dict(tm.stages),
        warnings=tuple(warnings),
        tolerances=tol,
    )
    return cmap, report


def _run_cut_pipeline(spec, tol, h, order, rules, kind):
    spec = geo.validate_domain(spec)
    projector = geo.BoundaryProjector(spec)
    h = _default_h(spec, h)
    base_rules = list(rules) if rules is not None else default_rules(spec, h)
    tm = _Timer()

    eps2 = tol.saddle_gradient
    eps3 = tol.boundary_param
    h_i = h
    extra_rules = []
    best = None
    prev = None
    warnings = []
    iterations = 0
    for it in range(tol.max_outer):
        iterations += 1
        try:
            cur = _cut_pass(spec, h_i, order, eps2, eps3,
                            base_rules + extra_rules, projector, tm)
        except (PipelineError, CutError, SolveError, MeshError) as exc:
            if best is None and it == tol.max_outer - 1:
                raise
            warnings.append(f"iteration {it + 1} failed: {exc}")
            cur = None
        if cur is not None:
            if cur["saddle_grad_rel"] > eps2:
                warnings.append(
                    f"iteration {it + 1}: saddle gradient "
                    f"{cur['saddle_grad_rel']:.3e} of peak exceeds the "
                    f"{eps2:.1e} quality target (mesh-limited)")
            if best is None or cur["e_r_n"] < best["e_r_n"]:
                best = cur
            if cur["e_r_n"] <= tol.reciprocal:
                break
            stalled = (prev is not None
                       and abs(cur["d"] - prev["d"]) <= tol.modulus * abs(cur["d"])
                       and cur["e_r_n"] > 0.5 * prev["e_r_n"])
            if stalled:
                warnings.append(
                    "capacity stabilized with the reciprocal error "
                    f"{cur['e_r_n']:.3e} above target {tol.reciprocal:.1e}")
                break
            extra_rules = [RefinementRule(tuple(s.point), levels=3, ratio=0.5)
                           for s in cur["saddles"]]
            prev = cur
        eps2 *= tol.shrink
        eps3 *= tol.shrink
        h_i *= 0.7
    else:
        warnings.append(
            f"reciprocal error {best['e_r_n']:.3e} above target "
            f"{tol.reciprocal:.1e} after {tol.max_outer} iterations; "
            "best iterate returned")
    return _finish_cut_run(spec, best, order, kind, iterations, tm,
                           warnings, tol)


def run_ring(spec, tolerances=None, h=None, order=5, rules=None):
    """Map a doubly connected domain onto an annulus.

    The potential is 1 on the hole and 0 outside, the capacity d is its
    flux, and a single steepest-descent connector opens the ring for the
    conjugate solve. Returns (ConformalMap, RunReport).
    """
    tol = tolerances if tolerances is not None else Tolerances()
    if len(spec.holes) != 1:
        raise PipelineError("ring pipeline needs exactly one hole")
    return _run_cut_pipeline(spec, tol, h, order, rules, kind="annulus")


def run_multiply_connected(spec, tolerances=None, h=None, order=5, rules=None):
    """Map a domain with m >= 2 holes onto the annulus with slits.

    Executes the full chain: solve the potential, locate the m - 1
    saddles, trace the cut system, open the domain, measure the flux
    jumps, solve the conjugate, and assemble the map. The outer loop
    shrinks the saddle/boundary tolerances, refines around the saddles,
    and repeats while the reciprocal error exceeds the target.
    """
    tol = tolerances if tolerances is not None else Tolerances()
    if len(spec.holes) < 2:
        raise PipelineError("multiply connected pipeline needs >= 2 holes")
    return _run_cut_pipeline(spec, tol, h, order, rules,
                             kind="annulus-with-slits")


def _marked_point_params(spec, projector):
    marks = spec.marked_points
    if marks is None or len(marks) != 4:
        raise PipelineError("quadrilateral needs exactly four marked points")
    scale = projector.scale
    fracs = []
    for p in marks:
        loop, frac, _, dist = projector.nearest(np.asarray(p, dtype=float))
        if loop != 0 or dist > 1e-6 * scale:
            raise PipelineError(f"marked point {tuple(p)} is not on the "
                                "outer boundary")
        fracs.append(frac)
    rel = [(f - fracs[0]) % 1.0 for f in fracs]
    if not (0.0 < rel[1] < rel[2] < rel[3] < 1.0):
        raise PipelineError("marked points must be positively ordered "
                            "along the outer boundary")
    return fracs


def run_simply_connected(spec, tolerances=None, h=None, order=5, rules=None):
    """Map a quadrilateral onto the rectangle [0, 1] x [0, M].

    The four marked boundary points split the boundary into arcs
    1..4; the potential is 0 on arc 2 and 1 on arc 4 with natural
    conditions on arcs 1 and 3, and M is its energy. The conjugate
    problem swaps the arc roles (0 on arc 3, 1 on arc 1), so the four
    marked points map to 1 + iM, iM, 0, and 1 in order.
    """
    tol = tolerances if tolerances is not None else Tolerances()
    spec = geo.validate_domain(spec)
    if spec.holes:
        raise PipelineError("quadrilateral pipeline needs a simply "
                            "connected domain")
    projector = geo.BoundaryProjector(spec)
    _marked_point_params(spec, projector)
    h = _default_h(spec, h)
    base_rules = list(rules) if rules is not None else default_rules(spec, h)
    tm = _Timer()
    with tm("mesh"):
        mesh = triangulate(spec, h, rules=base_rules)
    with tm("potential"):
        f1 = solve_laplace(mesh, {("E0", 2): 0.0, ("E0", 4): 1.0}, order=order)
    with tm("conjugate"):
        f2 = solve_laplace(mesh, {("E0", 3): 0.0, ("E0", 1): 1.0}, order=order)
    mod = f1.energy()
    mod_conj = f2.energy()
    e_r_n = abs(1.0 - mod * mod_conj)
    e_r_d = abs(1.0 - 1.0 / (mod * mod_conj))
    order_n = math.inf if e_r_n == 0 else abs(math.ceil(math.log10(e_r_n)))
    cmap = ConformalMap(u1=f1, u2=f2, d=mod)
    report = RunReport(
        name=spec.name or "custom",
        kind="rectangle",
        n_holes=0,
        fem_order=order,
        capacity=mod,
        modulus=mod,
        energy=mod,
        jumps=(),
        saddles=(),
        walk=(),
        e_r_d=e_r_d,
        e_r_n=e_r_n,
        order_d=order_n,
        order_n=order_n,
        dofs=f1.dofmap.n_dofs,
        mesh_nodes=mesh.n_nodes,
        mesh_triangles=mesh.n_triangles,
        moduli_dof=1,
        iterations=1,
        solves=(
            ("potential", f1.dofmap.n_dofs, f1.residual, mod),
            ("conjugate", f2.dofmap.n_dofs, f2.residual, mod_conj),
        ),
        timings=dict(tm.stages),
        warnings=(),
        tolerances=tol,
    )
    return cmap, report


def run_domain(spec, tolerances=None, h=None, order=5, rules=None):
    """Dispatch on connectivity: quadrilateral, ring, or multiply."""
    m = len(spec.holes)
    if m == 0:
        return run_simply_connected(spec, tolerances, h, order, rules)
    if m == 1:
        return run_ring(spec, tolerances, h, order, rules)
    return run_multiply_connected(spec, tolerances, h, order, rules)


def convergence_sweep(spec, h_ladder=None, p_ladder=None, h=None, order=None,
                      tolerances=None, frozen_cuts=False):
    """Run the pipeline over a refinement ladder and tabulate the errors.

    Exactly one of h_ladder (mesh sizes) or p_ladder (element orders) is
    given; the other parameter (order resp. h) stays fixed. With
    frozen_cuts the cut system is traced once at the first rung and
    reused, isolating FE convergence from cut-placement consistency
    error; otherwise every rung recomputes saddles and cuts.
    """
    if (h_ladder is None) == (p_ladder is None):
        raise ValueError("give exactly one of h_ladder or p_ladder")
    tol = tolerances if tolerances is not None else Tolerances()
    spec = geo.validate_domain(spec)
    m = len(spec.holes)

    if m == 0:
        rows = []
        if h_ladder is not None:
            for hv in h_ladder:
                _, rep = run_simply_connected(spec, tol, h=hv,
                                              order=order or 5)
                rows.append(SweepRow(float(hv), rep.capacity, rep.e_r_d,
                                     rep.e_r_n, rep.order_n, rep.dofs))
            return SweepResult("h", tuple(rows))
        for pv in p_ladder:
            _, rep = run_simply_connected(spec, tol, h=h, order=int(pv))
            rows.append(SweepRow(float(pv), rep.capacity, rep.e_r_d,
                                 rep.e_r_n, rep.order_n, rep.dofs))
        return SweepResult("p", tuple(rows))

    projector = geo.BoundaryProjector(spec)
    bc = _hole_bc(m)
    ladder = h_ladder if h_ladder is not None else p_ladder
    kind = "h" if h_ladder is not None else "p"
    rows = []
    frozen = None
    tm = _Timer()
    for lv in ladder:
        h_i = float(lv) if kind == "h" else _default_h(spec, h)
        p_i = (order or 5) if kind == "h" else int(lv)
        rules = default_rules(spec, h_i)
        if frozen_cuts and frozen is not None:
            cutset = frozen
        else:
            mesh = triangulate(spec, h_i, rules=rules)
            f0 = solve_laplace(mesh, bc, order=p_i)
            saddles = find_saddles(f0)
            if sum(s.multiplicity for s in saddles) != m - 1:
                raise PipelineError("saddle search failed at ladder "
                                    f"level {lv}")
            cutset = build_cuts(f0, saddles, spec=spec, projector=projector,
                                offset=max(tol.boundary_param, 1e-12))
            if frozen_cuts:
                frozen = cutset
        cm = embed_polyline(spec, h_i, cutset.polylines(), rules=rules)
        f1 = solve_laplace(cm.uncut, bc, order=p_i)
        conj = assemble_conjugate_boundary(cm, cutset)
        jumps, _ = conjugate_jumps(f1, conj, cm, cutset=cutset)
        conj = assign_cut_values(conj, list(jumps))
        f2 = solve_conjugate(conj, cm, order=p_i, normalized=True)
        d = conj.d
        e2n = f2.energy()
        e_r_d, _, _ = reciprocal_errors(d, e2n * d * d)
        _, e_r_n, order_n = reciprocal_errors(d, e2n)
        rows.append(SweepRow(float(lv), d, e_r_d, e_r_n, order_n,
                             f1.dofmap.n_dofs))
    return SweepResult(kind, tuple(rows))
