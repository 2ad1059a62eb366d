"""Sparse finite-difference operators on a :class:`~gbulab.geometry.Mesh`.

All operators act on *full* field vectors (``u.ravel()``), boundary nodes
included.  The gradient is stored as a list of component matrices whose
squares sum to |grad u|^2; on the disc the centre row of the two components
holds the Cartesian (x, y) derivatives recovered from the first ring.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .geometry import DISC2D, INTERVAL, RADIAL_BALL, Mesh


@dataclass(frozen=True, eq=False)
class Operators:
    lap: sp.csr_matrix
    grads: tuple
    dnu: sp.csr_matrix  # inward normal derivative, nonzero rows on boundary nodes only
    boundary: np.ndarray  # full-layout mask
    unknowns: np.ndarray  # full-layout indices of the independent unknowns
    expand: sp.csr_matrix  # full <- reduced
    lap_red: sp.csr_matrix
    grads_red: tuple
    tridiagonal: bool
    # disc only: u_r / r + u_thth / r^2, the Laplacian minus u_rr
    lap_tangential: Optional[sp.csr_matrix] = None


def _centered_coeffs(hm, hp):
    s = hm + hp
    d1 = (-hp / (hm * s), (hp - hm) / (hm * hp), hm / (hp * s))
    d2 = (2.0 / (hm * s), -2.0 / (hm * hp), 2.0 / (hp * s))
    return d1, d2


def _one_sided(h1, h2):
    """Second-order forward derivative weights on nodes 0, 1, 2."""
    return (
        -(2.0 * h1 + h2) / (h1 * (h1 + h2)),
        (h1 + h2) / (h1 * h2),
        -h1 / (h2 * (h1 + h2)),
    )


def _line_operators(mesh: Mesh):
    """Radial/1D derivative matrices on the node line (no angular part)."""
    n = mesh.n_nodes
    s = mesh.spacing
    hm, hp = s[:-1], s[1:]
    (cm, c0, cp), (am, a0, ap) = _centered_coeffs(hm, hp)
    i = np.arange(1, n - 1)
    rows = np.concatenate((i, i, i))
    cols = np.concatenate((i - 1, i, i + 1))
    D = sp.csr_matrix((np.concatenate((cm, c0, cp)), (rows, cols)), shape=(n, n))
    D2 = sp.csr_matrix((np.concatenate((am, a0, ap)), (rows, cols)), shape=(n, n))

    # one-sided derivatives (in the coordinate direction) at both ends
    w0 = _one_sided(s[0], s[1])
    wn = _one_sided(s[-1], s[-2])
    Dend = sp.lil_matrix((n, n))
    Dend[0, 0:3] = w0
    Dend[n - 1, n - 1] = -wn[0]
    Dend[n - 1, n - 2] = -wn[1]
    Dend[n - 1, n - 3] = -wn[2]
    return D.tolil(), D2.tolil(), Dend.tocsr()


def build_operators(mesh: Mesh) -> Operators:
    kind = mesh.kind
    n = mesh.n_nodes
    r = mesh.nodes
    D, D2, Dend = _line_operators(mesh)

    lap_tan = None
    if kind != DISC2D:
        lap = D2.copy()
        if kind != INTERVAL:
            dim = mesh.spec.dimension
            radial = sp.diags(np.where(r > 0, (dim - 1) / np.where(r > 0, r, 1.0), 0.0))
            lap = (lap.tocsr() + radial @ D.tocsr()).tolil()
        grad = D.copy()
        if kind == RADIAL_BALL:
            # centre: symmetric extension u(-h) = u(h)
            dim = mesh.spec.dimension
            h1 = mesh.spacing[0]
            lap[0, 0] = -2.0 * dim / h1**2
            lap[0, 1] = 2.0 * dim / h1**2
            grad[0, :] = 0.0
            boundary = np.zeros(n, dtype=bool)
            boundary[-1] = True
        else:
            boundary = np.zeros(n, dtype=bool)
            boundary[[0, -1]] = True
        grad = grad.tocsr() + sp.diags(boundary.astype(float)) @ Dend
        # inward normal: +d/dx at the left end, -d/dx at the right end
        sign = np.zeros(n)
        if boundary[0]:
            sign[0] = 1.0
        sign[-1] = -1.0
        dnu = sp.diags(sign) @ Dend
        lap = lap.tocsr()
        lap = sp.diags((~boundary).astype(float)) @ lap
        unknowns = np.flatnonzero(~boundary)
        grads = (sp.csr_matrix(grad),)
        tri = True
    else:
        lap, grads, dnu, boundary, unknowns, lap_tan = _disc_operators(mesh, D, D2, Dend)
        tri = False

    nfull = boundary.size
    nz = unknowns.size
    if kind == DISC2D:
        nth = len(mesh.theta)
        # centre unknown feeds every (0, k) entry
        rows = np.concatenate((np.arange(nth), unknowns[1:]))
        cols = np.concatenate((np.zeros(nth, dtype=int), np.arange(1, nz)))
    else:
        rows, cols = unknowns, np.arange(nz)
    expand = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(nfull, nz))
    restrict = sp.csr_matrix((np.ones(nz), (np.arange(nz), unknowns)), shape=(nz, nfull))
    lap = sp.csr_matrix(lap)
    lap_red = (restrict @ lap @ expand).tocsr()
    grads_red = tuple((restrict @ g @ expand).tocsr() for g in grads)
    return Operators(
        lap=lap,
        grads=tuple(sp.csr_matrix(g) for g in grads),
        dnu=sp.csr_matrix(dnu),
        boundary=boundary,
        unknowns=unknowns,
        expand=expand,
        lap_red=lap_red,
        grads_red=grads_red,
        tridiagonal=tri,
        lap_tangential=lap_tan,
    )


def _disc_operators(mesh: Mesh, D, D2, Dend):
    r = mesh.nodes
    nr = len(r)
    th = mesh.theta
    nth = len(th)
    dth = 2.0 * np.pi / nth
    Ith = sp.identity(nth, format="csr")

    # angular periodic stencils
    e = np.ones(nth)
    P1 = sp.diags([-e[:-1], e[:-1]], [-1, 1], shape=(nth, nth)).tolil()
    P1[0, nth - 1] = -1.0
    P1[nth - 1, 0] = 1.0
    P1 = P1.tocsr() / (2.0 * dth)
    P2 = sp.diags([e[:-1], -2 * e, e[:-1]], [-1, 0, 1], shape=(nth, nth)).tolil()
    P2[0, nth - 1] = 1.0
    P2[nth - 1, 0] = 1.0
    P2 = P2.tocsr() / dth**2

    interior_r = np.zeros(nr)
    interior_r[1:-1] = 1.0
    inv_r = np.zeros(nr)
    inv_r[1:-1] = 1.0 / r[1:-1]
    Dc, D2c = D.tocsr(), D2.tocsr()
    Sr = sp.diags(interior_r)
    lap = (
        sp.kron(Sr @ D2c + sp.diags(inv_r) @ Dc, Ith)
        + sp.kron(sp.diags(inv_r**2), P2)
    ).tolil()
    lap_tan = (sp.kron(sp.diags(inv_r) @ Dc, Ith) + sp.kron(sp.diags(inv_r**2), P2)).tocsr()
    gr = (sp.kron(Sr @ Dc, Ith) + sp.kron(sp.diags(np.eye(nr)[-1]) @ Dend, Ith)).tolil()
    gt = sp.kron(sp.diags(inv_r), P1).tolil()

    # centre rows: flux balance over the first ring and first-mode gradient
    r1 = mesh.spacing[0]
    ring = nth + np.arange(nth)
    for k in range(nth):
        lap[k, :] = 0.0
        lap[k, 0] = -4.0 / r1**2
        lap[k, ring] = 4.0 / (nth * r1**2)
        gr[k, :] = 0.0
        gt[k, :] = 0.0
        gr[k, ring] = 2.0 * np.cos(th) / (nth * r1)
        gt[k, ring] = 2.0 * np.sin(th) / (nth * r1)

    boundary = np.zeros(nr * nth, dtype=bool)
    boundary[(nr - 1) * nth :] = True
    dnu = -sp.kron(sp.diags(np.eye(nr)[-1]) @ Dend, Ith)
    unknowns = np.concatenate(([0], np.arange(nth, (nr - 1) * nth)))
    return lap.tocsr(), (gr.tocsr(), gt.tocsr()), dnu.tocsr(), boundary, unknowns, lap_tan


def grad_components(ops: Operators, u_flat: np.ndarray):
    return [g @ u_flat for g in ops.grads]


def grad_magnitude(ops: Operators, u_flat: np.ndarray) -> np.ndarray:
    comps = grad_components(ops, u_flat)
    if len(comps) == 1:
        return np.abs(comps[0])
    return np.sqrt(sum(c * c for c in comps))
