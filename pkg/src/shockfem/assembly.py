"""Group-FEM assembly over conforming DOFs with hanging-node constraint folding.

Matrices are first built over all vertices (conforming + hanging) with exact
Q1 integrals on rectangles; conformity constraints are folded in with the
prolongation P, i.e. A = P^T A_all P.  Nodal flux Jacobians at hanging
vertices are the constrained combinations of the master Jacobians, matching
the flux interpolation of the group-FEM form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .fespace import FESpace
from .physics import (
    EulerGas,
    InadmissibleStateError,
    ScalarTransport,
    char_speeds,
    euler_primitives,
)

# 1D unit-interval matrices in corner order (0, 1):
#   MASS1[a, b] = (phi_b, phi_a),  GRAD1[a, b] = (phi_b', phi_a)
MASS1 = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])
GRAD1 = np.array([[-0.5, 0.5], [-0.5, 0.5]])

# tensor products over the local corner order (SW, SE, NW, NE);
# CX/CY carry the unit-square values of (d_x phi_b, phi_a) and (d_y phi_b, phi_a)
_ax = np.array([k & 1 for k in range(4)])
_ay = np.array([k >> 1 for k in range(4)])
CX = GRAD1[np.ix_(_ax, _ax)] * MASS1[np.ix_(_ay, _ay)]
CY = MASS1[np.ix_(_ax, _ax)] * GRAD1[np.ix_(_ay, _ay)]
MM = MASS1[np.ix_(_ax, _ax)] * MASS1[np.ix_(_ay, _ay)]

_SIGN_TOL = 1e-12


@dataclass
class ElementalGeometry:
    """Exact Q1 integrals on one rectangular cell (4x4 corner pairs).

    c[a, b] = (grad phi_b, phi_a) as a 2-vector; mass[a, b] = (phi_b, phi_a).
    """

    c: np.ndarray
    mass: np.ndarray


def elemental_geometry(space: FESpace, ci: int) -> ElementalGeometry:
    hx, hy = space.cell_sizes[ci]
    c = np.stack([CX * hy, CY * hx], axis=-1)
    return ElementalGeometry(c=c, mass=MM * hx * hy)


@dataclass
class BoundaryData:
    """Prescribed boundary state field; also used to classify inflow/outflow."""

    value: Callable  # x with shape (..., 2) -> (..., m)


@dataclass
class BoundaryInfo:
    dirichlet: np.ndarray      # (N, m) bool, True where a component is fixed
    values: np.ndarray         # (N, m) prescribed values (valid where fixed)
    face_outflow: np.ndarray   # (F, m) bool, True where the Galerkin boundary
                               # term is active for a component on a face


def _char_speeds_for(model, state, normal):
    if isinstance(model, ScalarTransport):
        raise AssertionError("scalar speeds handled inline")
    _, v, _, _, a = euler_primitives(model, state)
    return char_speeds(v, a, normal)


def classify_boundary(space: FESpace, model, bc: BoundaryData) -> BoundaryInfo:
    """Per-component inflow/outflow split from the prescribed boundary field.

    The classification is a function of the geometry and the boundary data
    only, so it is cached on the space (keyed by the data object).
    """
    cache = getattr(space, "_binfo_cache", None)
    key = (id(bc), id(model))
    if cache is not None and cache[0] == key:
        return cache[1]
    # the cached tuple keeps bc/model alive so their ids cannot be recycled
    m = model.m
    N = space.num_nodes
    dirichlet = np.zeros((N, m), dtype=bool)
    faces = space.boundary_faces
    face_out = np.zeros((len(faces), m), dtype=bool)
    for fi, (ci, na, nb, flen, normal) in enumerate(faces):
        mid = 0.5 * (space.nodes[na] + space.nodes[nb])
        n = np.asarray(normal)
        state = np.asarray(bc.value(mid), dtype=float).reshape(m)
        if isinstance(model, ScalarTransport):
            lam = np.array([np.dot(model.velocity_at(mid), n)])
        else:
            lam = _char_speeds_for(model, state, n)
        inflow = lam <= _SIGN_TOL * max(1.0, np.max(np.abs(lam)))
        face_out[fi] = ~inflow
        dirichlet[na] |= inflow
        dirichlet[nb] |= inflow
    values = np.zeros((N, m))
    fixed_nodes = np.flatnonzero(dirichlet.any(axis=1))
    if len(fixed_nodes):
        values[fixed_nodes] = np.asarray(
            bc.value(space.nodes[fixed_nodes]), dtype=float).reshape(len(fixed_nodes), m)
    binfo = BoundaryInfo(dirichlet=dirichlet, values=values, face_outflow=face_out)
    space._binfo_cache = (key, binfo, bc, model)
    return binfo


def nodal_jacobians(space: FESpace, model, U: np.ndarray):
    """Directional flux Jacobians (A_x, A_y) at every vertex.

    Hanging vertices carry the constrained combination of master Jacobians.
    """
    m = model.m
    if isinstance(model, ScalarTransport):
        v = model.velocity_at(space.nodes)
        Ax = v[:, 0].reshape(-1, 1, 1)
        Ay = v[:, 1].reshape(-1, 1, 1)
    else:
        try:
            _, v, _, H, _ = euler_primitives(model, U.reshape(-1, m))
        except InadmissibleStateError as err:
            bad = _first_bad_node(model, U.reshape(-1, m))
            raise InadmissibleStateError(f"node {bad}: {err}") from err
        from .physics import euler_jacobian_vH
        Ax = euler_jacobian_vH(model.gamma, v, H, np.array([1.0, 0.0]))
        Ay = euler_jacobian_vH(model.gamma, v, H, np.array([0.0, 1.0]))
    Axv = space.P @ Ax.reshape(space.num_nodes, m * m)
    Ayv = space.P @ Ay.reshape(space.num_nodes, m * m)
    return Axv.reshape(-1, m, m), Ayv.reshape(-1, m, m)


def _first_bad_node(model, U):
    for i, u in enumerate(U):
        try:
            euler_primitives(model, u)
        except InadmissibleStateError:
            return i
    return -1


def _flat_coo(rows_v, cols_v, blocks, m):
    """Expand vertex-indexed m x m blocks to flat COO triplets."""
    nb = len(rows_v)
    if m == 1:
        return rows_v, cols_v, blocks.reshape(nb)
    rr = (rows_v[:, None, None] * m + np.arange(m)[None, :, None])
    cc = (cols_v[:, None, None] * m + np.arange(m)[None, None, :])
    rr = np.broadcast_to(rr, (nb, m, m)).reshape(-1)
    cc = np.broadcast_to(cc, (nb, m, m)).reshape(-1)
    return rr, cc, blocks.reshape(-1)


def assemble_system(space: FESpace, model, U: np.ndarray, bc: BoundaryData,
                    source: Callable | None = None):
    """Assemble (M, K, G): scalar mass matrix, flat convection+boundary matrix,
    and the RHS vector, all over conforming DOFs."""
    m = model.m
    N = space.num_nodes
    nv = N + space.num_hanging
    cn = space.cell_nodes
    hx = space.cell_sizes[:, 0]
    hy = space.cell_sizes[:, 1]

    # mass over all vertices, then fold
    mass_blocks = MM[None, :, :] * (hx * hy)[:, None, None]
    rows = np.repeat(cn, 4, axis=1).reshape(-1)
    cols = np.tile(cn, (1, 4)).reshape(-1)
    M_all = sp.coo_matrix((mass_blocks.transpose(0, 2, 1).reshape(-1), (rows, cols)),
                          shape=(nv, nv)).tocsr()
    M = (space.P.T @ M_all @ space.P).tocsr()
    M.sort_indices()

    # convection: block[a, b] = -(A(u_b) . c^e[b, a])
    Ax, Ay = nodal_jacobians(space, model, U)
    cxe = CX.T[None, :, :] * hy[:, None, None]   # cxe[cell, a, b] = c^e[b, a]_x
    cye = CY.T[None, :, :] * hx[:, None, None]
    Axc = Ax[cn]   # (ncell, 4, m, m) trial-slot Jacobians
    Ayc = Ay[cn]
    blocks = -(np.einsum("cab,cbij->cabij", cxe, Axc)
               + np.einsum("cab,cbij->cabij", cye, Ayc))
    rows_v = np.repeat(cn, 4, axis=1).reshape(-1)
    cols_v = np.tile(cn, (1, 4)).reshape(-1)
    rr, cc, vv = _flat_coo(rows_v, cols_v, blocks.reshape(-1, m, m), m)

    # outflow boundary term, per face and per row component (static layout
    # cached on the space: 4 (row, col) corner combos per face)
    binfo = classify_boundary(space, model, bc)
    bstat = getattr(space, "_bface_static", None)
    if bstat is None:
        faces = space.boundary_faces
        na = np.array([f[1] for f in faces], dtype=np.int64)
        nb = np.array([f[2] for f in faces], dtype=np.int64)
        ln = np.array([f[3] for f in faces])
        nrm = np.array([f[4] for f in faces])
        rows_f = np.stack([na, na, nb, nb], axis=1)
        cols_f = np.stack([na, nb, na, nb], axis=1)
        med = np.stack([MASS1[0, 0] * ln, MASS1[0, 1] * ln,
                        MASS1[1, 0] * ln, MASS1[1, 1] * ln], axis=1)
        bstat = (rows_f, cols_f, med, nrm)
        space._bface_static = bstat
    rows_f, cols_f, med, nrm = bstat
    if len(rows_f):
        An = (Ax[cols_f] * nrm[:, None, 0, None, None]
              + Ay[cols_f] * nrm[:, None, 1, None, None])       # (F, 4, m, m)
        blocks_b = An * med[:, :, None, None]
        rowmask = binfo.face_outflow.astype(float)               # (F, m)
        blocks_b = blocks_b * rowmask[:, None, :, None]
        r2, c2, v2 = _flat_coo(rows_f.reshape(-1), cols_f.reshape(-1),
                               blocks_b.reshape(-1, m, m), m)
        rr = np.concatenate([rr, r2])
        cc = np.concatenate([cc, c2])
        vv = np.concatenate([vv, v2])

    K_all = sp.coo_matrix((vv, (rr, cc)), shape=(nv * m, nv * m)).tocsr()
    Pm = space.P if m == 1 else sp.kron(space.P, sp.identity(m, format="csr"), format="csr")
    K = (Pm.T @ K_all @ Pm).tocsr()
    K.sort_indices()

    G = np.zeros(N * m)
    if source is not None:
        # 3x3 Gauss per cell is plenty for smooth forcing terms
        gp, gw = np.polynomial.legendre.leggauss(3)
        gp = 0.5 * (gp + 1.0)
        gw = 0.5 * gw
        Gv = np.zeros((nv, m))
        for ix in range(3):
            for iy in range(3):
                pts = space.cell_origin + space.cell_sizes * np.array([gp[ix], gp[iy]])
                g = np.asarray(source(pts), dtype=float).reshape(len(pts), m)
                wq = gw[ix] * gw[iy] * hx * hy
                wxa = np.where(_ax == 0, 1.0 - gp[ix], gp[ix])
                wya = np.where(_ay == 0, 1.0 - gp[iy], gp[iy])
                shape = wxa * wya
                contrib = (wq[:, None] * g)[:, None, :] * shape[None, :, None]
                np.add.at(Gv, cn.reshape(-1), contrib.reshape(-1, 4, m).reshape(-1, m))
        G = (space.P.T @ Gv).reshape(-1)

    return M, K, G, binfo


def apply_dirichlet(A: sp.csr_matrix, b: np.ndarray, binfo: BoundaryInfo):
    """Row/column elimination of fixed DOFs: identity rows with prescribed
    values, columns folded into the RHS."""
    fixed = binfo.dirichlet.reshape(-1)
    vals = binfo.values.reshape(-1)
    if not fixed.any():
        return A.copy(), b.copy()
    A = A.tocsr(copy=True)
    b = b.copy()
    xfix = np.where(fixed, vals, 0.0)
    b -= A @ xfix
    keep = ~fixed
    D = sp.diags(keep.astype(float))
    A = (D @ A @ D).tolil()
    idx = np.flatnonzero(fixed)
    A[idx, idx] = 1.0
    b[idx] = vals[idx]
    return A.tocsr(), b


def constrain_rows(A: sp.csr_matrix, fixed_flat: np.ndarray):
    """Replace fixed rows with identity rows (increment-form solves)."""
    keep = sp.diags((~fixed_flat).astype(float))
    out = keep @ A
    out = out + sp.diags(fixed_flat.astype(float))
    return out.tocsr()
