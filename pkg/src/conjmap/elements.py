"""Reference triangle machinery: node lattices, quadrature, and nodal bases.

Everything lives on the unit triangle T = {(xi, eta) : xi, eta >= 0, xi + eta <= 1}.
Nodal Lagrange bases of arbitrary order are built on the equispaced lattice by
inverting a Vandermonde matrix in an orthogonal (collapsed-coordinate Jacobi)
basis, which stays well conditioned far beyond the orders used in practice.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


def jacobi_recurrence(nmax, alpha, beta, x):
    """Evaluate Jacobi polynomials P_n^(alpha,beta)(x) for n = 0..nmax.

    Returns an array of shape (nmax+1,) + x.shape. Uses the standard
    three-term recurrence, stable for the small (alpha, beta) needed here.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty((nmax + 1,) + x.shape, dtype=float)
    out[0] = 1.0
    if nmax == 0:
        return out
    out[1] = 0.5 * ((alpha + beta + 2.0) * x + (alpha - beta))
    for n in range(2, nmax + 1):
        s = 2 * n + alpha + beta
        c1 = 2.0 * n * (n + alpha + beta) * (s - 2.0)
        c2 = (s - 1.0) * (alpha * alpha - beta * beta)
        c3 = (s - 1.0) * s * (s - 2.0)
        c4 = 2.0 * (n + alpha - 1.0) * (n + beta - 1.0) * s
        out[n] = ((c2 + c3 * x) * out[n - 1] - c4 * out[n - 2]) / c1
    return out


def triangle_quadrature(degree):
    """Gauss quadrature on the unit triangle, exact for total degree <= degree.

    Conical product of Gauss-Legendre with Gauss-Jacobi(1, 0); the Jacobi
    weight absorbs the Duffy-map Jacobian so polynomial exactness is exact,
    not approximate.
    """
    n = max(1, (degree + 2) // 2)
    xg, wg = np.polynomial.legendre.leggauss(n)
    # map to [0, 1]
    u = 0.5 * (xg + 1.0)
    wu = 0.5 * wg
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    eta = 0.5 * (xj + 1.0)
    weta = 0.25 * wj
    U, E = np.meshgrid(u, eta, indexing="ij")
    WU, WE = np.meshgrid(wu, weta, indexing="ij")
    pts = np.column_stack([(U * (1.0 - E)).ravel(), E.ravel()])
    w = (WU * WE).ravel()
    return pts, w


def lattice_multi_indices(p):
    """Lattice multi-indices (i, j) of the order-p node layout.

    Order: the 3 vertices, then p-1 nodes per edge (edge 0: v0->v1,
    edge 1: v1->v2, edge 2: v2->v0), then interior nodes lexicographically.
    """
    idx = [(0, 0), (p, 0), (0, p)]
    idx += [(i, 0) for i in range(1, p)]
    idx += [(p - i, i) for i in range(1, p)]
    idx += [(0, p - i) for i in range(1, p)]
    for i in range(1, p):
        for j in range(1, p - i):
            idx.append((i, j))
    return idx


def _pkd_eval(p, pts, want_grad):
    """Orthonormalized collapsed-coordinate basis values (and gradients)."""
    pts = np.asarray(pts, dtype=float)
    xi = pts[:, 0]
    eta = pts[:, 1]
    m = len(pts)
    nb = (p + 1) * (p + 2) // 2
    den = 1.0 - eta
    safe = den > 1e-14
    a = np.where(safe, 2.0 * xi / np.where(safe, den, 1.0) - 1.0, -1.0)
    b = 2.0 * eta - 1.0

    pa = jacobi_recurrence(p, 0.0, 0.0, a)
    if want_grad:
        dpa = np.zeros_like(pa)
        if p >= 1:
            grow = jacobi_recurrence(p - 1, 1.0, 1.0, a)
            for i in range(1, p + 1):
                dpa[i] = 0.5 * (i + 1.0) * grow[i - 1]

    vals = np.empty((m, nb))
    grads = np.empty((m, nb, 2)) if want_grad else None
    powers = np.empty((p + 2, m))
    powers[0] = 1.0
    for k in range(1, p + 2):
        powers[k] = powers[k - 1] * den

    col = 0
    order = []
    for k in range(p + 1):
        for i in range(k, -1, -1):
            order.append((i, k - i))
    # group by i so each Jacobi family is generated once
    by_i = {}
    for pos, (i, j) in enumerate(order):
        by_i.setdefault(i, []).append((pos, j))
    for i in range(p + 1):
        pb = jacobi_recurrence(p - i, 2.0 * i + 1.0, 0.0, b)
        if want_grad:
            dpb = np.zeros_like(pb)
            if p - i >= 1:
                grow = jacobi_recurrence(p - i - 1, 2.0 * i + 2.0, 1.0, b)
                for j in range(1, p - i + 1):
                    dpb[j] = 0.5 * (j + 2.0 * i + 2.0) * grow[j - 1]
        fi = powers[i]
        fim1 = powers[i - 1] if i >= 1 else np.zeros(m)
        for pos, j in by_i[i]:
            v = pa[i] * fi * pb[j]
            vals[:, pos] = v
            if want_grad:
                gx = 2.0 * dpa[i] * fim1 * pb[j]
                ge = (
                    dpa[i] * (a + 1.0) * fim1 * pb[j]
                    - i * fim1 * pa[i] * pb[j]
                    + 2.0 * fi * pa[i] * dpb[j]
                )
                grads[:, pos, 0] = gx
                grads[:, pos, 1] = ge
        col += 1
    return (vals, grads) if want_grad else (vals, None)


def lattice_subtriangles(p):
    """Triples of local lattice indices forming the p^2 sub-triangle grid."""
    pos = {ij: k for k, ij in enumerate(lattice_multi_indices(p))}
    tris = []
    for i in range(p):
        for j in range(p - i):
            tris.append((pos[(i, j)], pos[(i + 1, j)], pos[(i, j + 1)]))
            if i + j <= p - 2:
                tris.append((pos[(i + 1, j)], pos[(i + 1, j + 1)], pos[(i, j + 1)]))
    return np.array(tris, dtype=np.int32)


@dataclass(frozen=True)
class ReferenceElement:
    """Precomputed order-p nodal element on the unit triangle."""

    order: int
    nodes: np.ndarray          # (n, 2) lattice coordinates
    coeff: np.ndarray          # (n, n): nodal basis = PKD values @ coeff
    quad_points: np.ndarray    # (q, 2)
    quad_weights: np.ndarray   # (q,)
    basis_quad: np.ndarray     # (q, n) nodal basis at quad points
    grad_quad: np.ndarray      # (q, n, 2)
    axx: np.ndarray            # (n, n) reference stiffness tensors
    axy: np.ndarray
    ayy: np.ndarray

    @property
    def n_nodes(self):
        return len(self.nodes)

    def basis_at(self, pts):
        vals, _ = _pkd_eval(self.order, np.atleast_2d(pts), False)
        return vals @ self.coeff

    def basis_and_grad_at(self, pts):
        vals, grads = _pkd_eval(self.order, np.atleast_2d(pts), True)
        n = vals @ self.coeff
        dn = np.einsum("mbr,bk->mkr", grads, self.coeff)
        return n, dn

    def edge_local_nodes(self, edge):
        """Local node indices along edge 0, 1, or 2, endpoint to endpoint."""
        p = self.order
        v = [(0, 1), (1, 2), (2, 0)][edge]
        inner = list(range(3 + edge * (p - 1), 3 + (edge + 1) * (p - 1)))
        return [v[0]] + inner + [v[1]]


@lru_cache(maxsize=None)
def reference_element(order):
    if not 1 <= order <= 10:
        raise ValueError(f"element order must be in [1, 10], got {order}")
    p = order
    idx = lattice_multi_indices(p)
    nodes = np.array([(i / p, j / p) for i, j in idx], dtype=float)
    vals, _ = _pkd_eval(p, nodes, False)
    # normalize columns for conditioning before inverting
    qp, qw = triangle_quadrature(2 * p + 2)
    vq, gq = _pkd_eval(p, qp, True)
    norms = np.sqrt(np.einsum("q,qb,qb->b", qw, vq, vq))
    vals /= norms
    vq = vq / norms
    gq = gq / norms[None, :, None]
    coeff = np.linalg.inv(vals)
    basis_quad = vq @ coeff
    grad_quad = np.einsum("qbr,bk->qkr", gq, coeff)
    axx = np.einsum("q,qi,qj->ij", qw, grad_quad[:, :, 0], grad_quad[:, :, 0])
    axy = np.einsum("q,qi,qj->ij", qw, grad_quad[:, :, 0], grad_quad[:, :, 1])
    ayy = np.einsum("q,qi,qj->ij", qw, grad_quad[:, :, 1], grad_quad[:, :, 1])
    return ReferenceElement(
        order=p,
        nodes=nodes,
        coeff=coeff / norms[:, None],
        quad_points=qp,
        quad_weights=qw,
        basis_quad=basis_quad,
        grad_quad=grad_quad,
        axx=axx,
        axy=axy,
        ayy=ayy,
    )
