"""Nodal p-version finite elements for the Laplace equation.

Meshes carry straight triangles; curved boundaries enter through mesh
grading, not isoparametric maps. Basis functions are the nodal Lagrange
family on the order-p lattice, evaluated through an orthogonal polynomial
basis for conditioning, so orders up to 10 stay usable.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import cg, spsolve
from scipy.spatial import cKDTree

from .elements import lattice_multi_indices, reference_element

__all__ = [
    "SolveError",
    "DofMap",
    "BoundaryCondition",
    "assemble_stiffness",
    "dirichlet_energy",
    "solve_laplace",
    "PotentialField",
]

# Above this many free unknowns the direct factorization is abandoned for
# diagonally preconditioned conjugate gradients.
DIRECT_SOLVE_LIMIT = 200_000


class SolveError(RuntimeError):
    pass


class DofMap:
    """Global numbering: mesh vertices, then per-edge blocks, then interiors.

    Edge blocks are oriented from the lower to the higher vertex id, which
    makes the numbering independent of which triangle is asked.
    """

    def __init__(self, mesh, order):
        self.mesh = mesh
        self.order = int(order)
        p = self.order
        tris = mesh.triangles
        nt = len(tris)
        nv = mesh.n_nodes
        n_edge = p - 1
        n_int = (p - 1) * (p - 2) // 2

        raw = np.vstack([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
        und = np.sort(raw, axis=1)
        edges, inv = np.unique(und, axis=0, return_inverse=True)
        ne = len(edges)
        self.edges = edges
        self._edge_index = {(int(a), int(b)): k
                            for k, (a, b) in enumerate(edges)}
        self.n_dofs = nv + ne * n_edge + nt * n_int
        self.n_vertex = nv
        self._edge_base = nv
        self._int_base = nv + ne * n_edge

        nb = (p + 1) * (p + 2) // 2
        td = np.empty((nt, nb), dtype=np.int64)
        td[:, 0:3] = tris
        if n_edge:
            ks = np.arange(n_edge)
            for le in range(3):
                eid = inv[le * nt:(le + 1) * nt]
                fwd = raw[le * nt:(le + 1) * nt, 0] == edges[eid, 0]
                block = nv + eid[:, None] * n_edge + ks[None, :]
                rev = nv + eid[:, None] * n_edge + ks[None, ::-1]
                cols = slice(3 + le * n_edge, 3 + (le + 1) * n_edge)
                td[:, cols] = np.where(fwd[:, None], block, rev)
        if n_int:
            td[:, 3 + 3 * n_edge:] = (self._int_base
                                      + n_int * np.arange(nt)[:, None]
                                      + np.arange(n_int)[None, :])
        self.tri_dofs = td

        coords = np.empty((self.n_dofs, 2))
        coords[:nv] = mesh.nodes
        if n_edge:
            a = mesh.nodes[edges[:, 0]]
            b = mesh.nodes[edges[:, 1]]
            fr = (np.arange(1, p) / p)[None, :, None]
            coords[nv:self._int_base] = (
                a[:, None, :] * (1 - fr) + b[:, None, :] * fr
            ).reshape(-1, 2)
        if n_int:
            idx = lattice_multi_indices(p)[3 + 3 * n_edge:]
            rloc = np.array(idx, dtype=float) / p
            pa = mesh.nodes[tris[:, 0]]
            e1 = mesh.nodes[tris[:, 1]] - pa
            e2 = mesh.nodes[tris[:, 2]] - pa
            pts = (pa[:, None, :]
                   + rloc[None, :, 0, None] * e1[:, None, :]
                   + rloc[None, :, 1, None] * e2[:, None, :])
            coords[self._int_base:] = pts.reshape(-1, 2)
        self.dof_coords = coords

    def edge_dofs(self, a, b):
        """Dofs along the mesh edge a-b, ordered from a to b, endpoints
        included."""
        a = int(a)
        b = int(b)
        key = (a, b) if a < b else (b, a)
        eid = self._edge_index[key]
        p = self.order
        inner = self._edge_base + eid * (p - 1) + np.arange(p - 1)
        if a > b:
            inner = inner[::-1]
        return np.concatenate(([a], inner, [b]))


def assemble_stiffness(mesh, order, dofmap=None):
    """Sparse Dirichlet-energy matrix: K[i, j] = int grad(phi_i).grad(phi_j)."""
    ref = reference_element(order)
    dm = dofmap if dofmap is not None else DofMap(mesh, order)
    tris = mesh.triangles
    pa = mesh.nodes[tris[:, 0]]
    e1 = mesh.nodes[tris[:, 1]] - pa
    e2 = mesh.nodes[tris[:, 2]] - pa
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(det <= 0):
        raise SolveError("mesh contains non-positively oriented triangles")
    g00 = np.einsum("ij,ij->i", e2, e2) / det
    g11 = np.einsum("ij,ij->i", e1, e1) / det
    g01 = -np.einsum("ij,ij->i", e1, e2) / det
    axy_sym = ref.axy + ref.axy.T

    nb = ref.n_nodes
    nt = len(tris)
    chunk = max(1, int(4e6 // (nb * nb)))
    rows = []
    cols = []
    vals = []
    for lo in range(0, nt, chunk):
        hi = min(nt, lo + chunk)
        kloc = (g00[lo:hi, None, None] * ref.axx
                + g01[lo:hi, None, None] * axy_sym
                + g11[lo:hi, None, None] * ref.ayy)
        td = dm.tri_dofs[lo:hi]
        rows.append(np.broadcast_to(td[:, :, None],
                                    kloc.shape).reshape(-1))
        cols.append(np.broadcast_to(td[:, None, :],
                                    kloc.shape).reshape(-1))
        vals.append(kloc.reshape(-1))
    k = coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(dm.n_dofs, dm.n_dofs)).tocsr()
    return k, dm


def dirichlet_energy(k, u):
    """Quadratic energy u'Ku of a coefficient vector."""
    return float(u @ (k @ u))


@dataclass
class BoundaryCondition:
    """Dirichlet data keyed by boundary identity; everything else is a
    homogeneous Neumann side.

    Keys may be a loop tag ("E1"), a (loop tag, subarc index) pair for
    marked-point arcs, or a (cut leg, side) pair for opened cut sides.
    Values are constants or callables mapping an (n, 2) array to n values.
    """

    dirichlet: dict = field(default_factory=dict)

    def _lookup(self, tag):
        if tag.kind == "cut":
            keys = [(tag.name, tag.side)]
        else:
            keys = []
            if tag.subarc is not None:
                keys.append((tag.name, tag.subarc))
            keys.append(tag.name)
        for key in keys:
            if key in self.dirichlet:
                return True, self.dirichlet[key]
        return False, None

    def resolve(self, mesh, dofmap):
        """Return (is_dirichlet mask, values) over all global dofs."""
        mask = np.zeros(dofmap.n_dofs, dtype=bool)
        vals = np.zeros(dofmap.n_dofs)
        scale = float(np.ptp(mesh.nodes, axis=0).max())
        for (a, b), tag in zip(mesh.edge_nodes, mesh.edge_tags):
            hit, value = self._lookup(tag)
            if not hit:
                continue
            dofs = dofmap.edge_dofs(a, b)
            if callable(value):
                v = np.asarray(value(dofmap.dof_coords[dofs]), dtype=float)
            else:
                v = np.full(len(dofs), float(value))
            clash = mask[dofs] & (np.abs(vals[dofs] - v) > 1e-9 * max(scale, 1))
            if np.any(clash):
                raise SolveError(
                    "conflicting Dirichlet values at shared boundary dofs")
            mask[dofs] = True
            vals[dofs] = v
        if not mask.any():
            raise SolveError("boundary condition fixes no dofs")
        return mask, vals


def solve_laplace(mesh, bc, order=3):
    """Solve the Laplace equation and return the resulting PotentialField.

    Dirichlet values are imposed by lifting; the reported residual is
    checked against 1e-12 relative to the load.
    """
    if isinstance(bc, dict):
        bc = BoundaryCondition(bc)
    k, dm = assemble_stiffness(mesh, order)
    mask, vals = bc.resolve(mesh, dm)
    g = np.where(mask, vals, 0.0)
    rhs = -(k @ g)
    free = np.nonzero(~mask)[0]
    kff = k[free][:, free]
    b = rhs[free]
    bnorm = max(float(np.linalg.norm(b)), float(np.linalg.norm(k @ g)), 1e-30)
    if len(free) <= DIRECT_SOLVE_LIMIT:
        x = spsolve(kff.tocsc(), b)
    else:
        d = kff.diagonal()
        precond = coo_matrix(
            (1.0 / d, (np.arange(len(d)), np.arange(len(d)))),
            shape=kff.shape).tocsr()
        x, info = cg(kff, b, rtol=1e-13, atol=0.0, maxiter=50_000, M=precond)
        if info != 0:
            raise SolveError(f"conjugate gradients did not converge ({info})")
    res = float(np.linalg.norm(kff @ x - b)) / bnorm
    if res > 1e-12:
        raise SolveError(f"linear solve residual {res:.2e} exceeds 1e-12")
    u = g.copy()
    u[free] = x
    return PotentialField(mesh, order, dm, u, k, mask, residual=res)


class PotentialField:
    """A solved scalar field: coefficients plus point evaluation machinery."""

    def __init__(self, mesh, order, dofmap, values, stiffness, dirichlet_mask,
                 residual=0.0):
        self.mesh = mesh
        self.order = int(order)
        self.dofmap = dofmap
        self.values = np.asarray(values, dtype=float)
        self.stiffness = stiffness
        self.dirichlet_mask = dirichlet_mask
        self.residual = float(residual)
        self.ref = reference_element(order)
        pa = mesh.nodes[mesh.triangles[:, 0]]
        self._pa = pa
        self._e1 = mesh.nodes[mesh.triangles[:, 1]] - pa
        self._e2 = mesh.nodes[mesh.triangles[:, 2]] - pa
        self._det = (self._e1[:, 0] * self._e2[:, 1]
                     - self._e1[:, 1] * self._e2[:, 0])
        cent = (self._pa + (self._e1 + self._e2) / 3.0)
        self._tree = cKDTree(cent)
        self._scale = float(np.ptp(mesh.nodes, axis=0).max())
        self._tri_edge = np.maximum(
            np.linalg.norm(self._e1, axis=1),
            np.maximum(np.linalg.norm(self._e2, axis=1),
                       np.linalg.norm(self._e2 - self._e1, axis=1)))

    def energy(self):
        return dirichlet_energy(self.stiffness, self.values)

    def local_size(self, pts):
        """Longest edge of the triangle containing each point."""
        tri, _ = self.locate(pts)
        return self._tri_edge[tri]

    def _reference_coords(self, pts, tri):
        d = pts - self._pa[tri]
        det = self._det[tri]
        xi = (self._e2[tri, 1] * d[:, 0] - self._e2[tri, 0] * d[:, 1]) / det
        eta = (-self._e1[tri, 1] * d[:, 0] + self._e1[tri, 0] * d[:, 1]) / det
        return xi, eta

    def locate(self, pts, max_violation=0.25):
        """Containing triangle and reference coordinates for each point.

        Points slightly outside the straight-edge mesh (curved boundary
        gaps) are attached to the least-violating nearby triangle; beyond
        max_violation in barycentric units the lookup fails.
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        n = len(pts)
        tri = np.full(n, -1, dtype=np.int64)
        best_xi = np.zeros(n)
        best_eta = np.zeros(n)
        todo = np.arange(n)
        for k in (8, 64):
            kq = min(k, self.mesh.n_triangles)
            _, cand = self._tree.query(pts[todo], k=kq)
            cand = cand.reshape(len(todo), -1)
            viol = np.full(len(todo), np.inf)
            for col in range(cand.shape[1]):
                t = cand[:, col]
                xi, eta = self._reference_coords(pts[todo], t)
                v = np.maximum(np.maximum(-xi, -eta), xi + eta - 1.0)
                better = v < viol
                viol = np.where(better, v, viol)
                sel = np.nonzero(better)[0]
                tri[todo[sel]] = t[sel]
                best_xi[todo[sel]] = xi[sel]
                best_eta[todo[sel]] = eta[sel]
                if (viol <= 1e-12).all():
                    break
            todo = todo[viol > 1e-9]
            if len(todo) == 0:
                break
        xi, eta = self._reference_coords(pts, tri)
        viol = np.maximum(np.maximum(-xi, -eta), xi + eta - 1.0)
        if np.any(viol > max_violation):
            worst = int(np.argmax(viol))
            raise SolveError(
                f"point {pts[worst]} lies outside the mesh "
                f"(violation {viol[worst]:.3g})")
        return tri, np.column_stack([xi, eta])

    def evaluate(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri, ref = self.locate(pts)
        basis = self.ref.basis_at(ref)
        u = self.values[self.dofmap.tri_dofs[tri]]
        return np.einsum("nb,nb->n", basis, u)

    def gradient_at(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tri, ref = self.locate(pts)
        _, dn = self.ref.basis_and_grad_at(ref)
        u = self.values[self.dofmap.tri_dofs[tri]]
        gref = np.einsum("nbr,nb->nr", dn, u)
        det = self._det[tri]
        e1 = self._e1[tri]
        e2 = self._e2[tri]
        gx = (e2[:, 1] * gref[:, 0] - e1[:, 1] * gref[:, 1]) / det
        gy = (-e2[:, 0] * gref[:, 0] + e1[:, 0] * gref[:, 1]) / det
        return np.column_stack([gx, gy])
