"""Shock detectors, artificial diffusion, and bounds-verification utilities.

Two variants are carried side by side: "sharp" (exact absolute values and
maxima, used in analysis-style checks) and "smooth" (twice-differentiable
regularizations, used by the nonlinear solver).  The smooth primitives'
derivatives are hand-coded and chain-ruled; the solver's Jacobian consumes
them through the *_with_grad entry points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import CX, CY
from .fespace import FESpace
from .physics import EulerGas, ScalarTransport, euler_primitives

SHARP = "sharp"
SMOOTH = "smooth"


# -- parameters ---------------------------------------------------------------

@dataclass
class StabilizationParams:
    """Detector exponent and regularization scales.

    sigma_h, eps_h scale with the local mesh size h; zeta_h is h-independent.
    lam_max is the global maximum wave speed, refreshed every nonlinear
    iteration and frozen within a linear solve.
    """

    q: float = 2.0
    sigma: float = 1e-2
    eps: float = 1e-4
    zeta: float = 1e-10
    L: float = 1.0
    lam_max: float = 1.0
    d: int = 2

    def sigma_h(self, h):
        return self.sigma * self.lam_max**2 * self.L ** (2 * (self.d - 3)) * h**4

    def eps_h(self, h):
        return self.eps * self.L ** (-4) * h**2

    @property
    def zeta_h(self):
        return self.zeta / self.L


def global_max_wave_speed(space: FESpace, model, U) -> float:
    if isinstance(model, ScalarTransport):
        v = model.velocity_at(space.nodes)
        return float(np.max(np.linalg.norm(v, axis=-1)))
    _, v, _, _, a = euler_primitives(model, U)
    return float(np.max(np.linalg.norm(v, axis=-1) + a))


# -- regularized primitives (values and derivatives) ---------------------------

def abs_upper(x, eps):
    """Smooth upper bound of |x|: sqrt(x^2 + eps)."""
    return np.sqrt(x * x + eps)


def d_abs_upper(x, eps):
    return x / np.sqrt(x * x + eps)


def abs_lower(x, eps):
    """Smooth lower bound of |x|: x^2 / sqrt(x^2 + eps)."""
    return x * x / np.sqrt(x * x + eps)


def d_abs_lower(x, eps):
    s = x * x + eps
    return x * (x * x + 2.0 * eps) / (s * np.sqrt(s))


def smooth_max(x, y, sigma):
    return 0.5 * abs_upper(x - y, sigma) + 0.5 * (x + y)


def d_smooth_max(x, y, sigma):
    """Partials (d/dx, d/dy) of smooth_max."""
    t = d_abs_upper(x - y, sigma)
    return 0.5 * (t + 1.0), 0.5 * (1.0 - t)


def soft_limit(x):
    """C^2 monotone ramp capping at one: 2x^4 - 5x^3 + 3x^2 + x below 1."""
    x = np.asarray(x, dtype=float)
    y = 2.0 * x**4 - 5.0 * x**3 + 3.0 * x**2 + x
    return np.where(x < 1.0, y, 1.0)


def d_soft_limit(x):
    x = np.asarray(x, dtype=float)
    return np.where(x < 1.0, 8.0 * x**3 - 15.0 * x**2 + 6.0 * x + 1.0, 0.0)


# -- detector -------------------------------------------------------------------

@dataclass
class DetectorField:
    alpha: np.ndarray          # (N,) system detector on conforming nodes
    alpha_hanging: np.ndarray  # (Nh,) extension to hanging nodes
    variant: str = SHARP
    per_component: dict = field(default_factory=dict)


def jump_mean(space: FESpace, U, beta: int, i: int, j: int,
              params: StabilizationParams, variant=SHARP):
    """Directional gradient jump and mean for one ordered pair (i, j)."""
    sel = np.flatnonzero((space.pair_i == i) & (space.pair_j == j))
    if len(sel) == 0:
        raise ValueError(f"{j} is not a neighbor of {i}")
    e = int(sel[0])
    u = np.asarray(U).reshape(space.num_nodes, -1)[:, beta]
    d1 = (u[j] - u[i]) / space.pair_rlen[e]
    if space.pair_reduced[e]:
        if variant == SHARP:
            return d1, 0.5 * abs(d1)
        eps = params.eps_h(space.h_node[i])
        return d1, 0.5 * abs_lower(d1, eps)
    usym = float(np.dot(space.pair_sym_w[e], u[np.maximum(space.pair_sym_idx[e], 0)]))
    d2 = (usym - u[i]) / space.pair_slen[e]
    if variant == SHARP:
        return d1 + d2, 0.5 * (abs(d1) + abs(d2))
    eps = params.eps_h(space.h_node[i])
    return d1 + d2, 0.5 * (abs_lower(d1, eps) + abs_lower(d2, eps))


def _pair_differences(space: FESpace, u: np.ndarray):
    """d1, d2 arrays over the directed pair list (d2 zeroed on reduced pairs)."""
    pi, pj = space.pair_i, space.pair_j
    d1 = (u[pj] - u[pi]) / space.pair_rlen
    idx = np.maximum(space.pair_sym_idx, 0)
    usym = np.einsum("ek,ek->e", space.pair_sym_w, u[idx])
    slen = np.where(space.pair_reduced, 1.0, space.pair_slen)
    d2 = np.where(space.pair_reduced, 0.0, (usym - u[pi]) / slen)
    return d1, d2


def component_detector(space: FESpace, u: np.ndarray,
                       params: StabilizationParams, variant=SHARP,
                       zero_nodes=None):
    """Detector values for a single component over all conforming nodes."""
    pi = space.pair_i
    d1, d2 = _pair_differences(space, u)
    nred = ~space.pair_reduced
    N = space.num_nodes
    S = np.zeros(N)
    np.add.at(S, pi, d1 + d2)
    if variant == SHARP:
        m2 = np.abs(d1) + np.where(nred, np.abs(d2), 0.0)
        D = np.zeros(N)
        np.add.at(D, pi, m2)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(D > 0, np.abs(S) / np.where(D > 0, D, 1.0), 0.0)
        alpha = np.clip(ratio, 0.0, 1.0) ** params.q
    else:
        eps_i = params.eps_h(space.h_node)[pi]
        m2 = abs_lower(d1, eps_i) + np.where(nred, abs_lower(d2, eps_i), 0.0)
        D = np.zeros(N)
        np.add.at(D, pi, m2)
        num = abs_upper(S, params.eps_h(space.h_node)) + params.zeta_h
        den = D + params.zeta_h
        alpha = soft_limit(num / den) ** params.q
    if zero_nodes is not None:
        alpha = np.where(zero_nodes, 0.0, alpha)
    return alpha


def shock_detector(space: FESpace, U, beta: int, i: int,
                   params: StabilizationParams, variant=SHARP):
    u = np.asarray(U).reshape(space.num_nodes, -1)[:, beta]
    return float(component_detector(space, u, params, variant)[i])


def system_detector(space: FESpace, U, tracked, params: StabilizationParams,
                    variant=SHARP, zero_mask=None) -> DetectorField:
    """Max (sharp) or smoothed-max (smooth) of component detectors over the
    tracked set; hanging nodes inherit the max of their masters."""
    U = np.asarray(U).reshape(space.num_nodes, -1)
    per = {}
    for beta in tracked:
        zn = zero_mask[:, beta] if zero_mask is not None else None
        per[beta] = component_detector(space, U[:, beta], params, variant, zn)
    vals = [per[b] for b in tracked]
    alpha = vals[0]
    if len(vals) > 1:
        sig = params.sigma_h(space.h_node)
        for v in vals[1:]:
            alpha = np.maximum(alpha, v) if variant == SHARP else smooth_max(alpha, v, sig)
    hm = space.hanging_masters
    if space.num_hanging:
        a1, a2 = alpha[hm[:, 0]], alpha[hm[:, 1]]
        if variant == SHARP:
            ah = np.maximum(a1, a2)
        else:
            sig = params.sigma_h(np.minimum(space.h_node[hm[:, 0]], space.h_node[hm[:, 1]]))
            ah = smooth_max(a1, a2, sig)
    else:
        ah = np.zeros(0)
    return DetectorField(alpha=alpha, alpha_hanging=ah, variant=variant, per_component=per)


def detector_with_grad(space: FESpace, U, tracked, params: StabilizationParams,
                       zero_mask=None):
    """Smooth system detector plus its sparse derivative d(alpha)/d(U_flat).

    Returns (DetectorField, D_alpha) with D_alpha of shape (N, N*m).
    """
    U = np.asarray(U).reshape(space.num_nodes, -1)
    m = U.shape[1]
    N = space.num_nodes
    pi, pj = space.pair_i, space.pair_j
    nred = ~space.pair_reduced
    eps_node = params.eps_h(space.h_node)
    eps_i = eps_node[pi]
    idx = np.maximum(space.pair_sym_idx, 0)
    slen = np.where(space.pair_reduced, 1.0, space.pair_slen)

    per = {}
    grads = {}
    for beta in tracked:
        u = U[:, beta]
        d1, d2 = _pair_differences(space, u)
        S = np.zeros(N)
        np.add.at(S, pi, d1 + d2)
        m2 = abs_lower(d1, eps_i) + np.where(nred, abs_lower(d2, eps_i), 0.0)
        D = np.zeros(N)
        np.add.at(D, pi, m2)
        num = abs_upper(S, eps_node) + params.zeta_h
        den = D + params.zeta_h
        r = num / den
        Z = soft_limit(r)
        alpha = Z ** params.q
        dZq = params.q * Z ** (params.q - 1.0) * d_soft_limit(r)
        zn = zero_mask[:, beta] if zero_mask is not None else np.zeros(N, dtype=bool)
        alpha = np.where(zn, 0.0, alpha)
        dZq = np.where(zn, 0.0, dZq)
        per[beta] = alpha

        # chain: d(alpha_i)/du = dZq_i * (dr/dS * dS + dr/dD * dD)
        cS = (dZq * d_abs_upper(S, eps_node) / den)[pi]
        cD = (dZq * (-num / den**2))[pi]
        g1 = d_abs_lower(d1, eps_i)
        g2 = np.where(nred, d_abs_lower(d2, eps_i), 0.0)
        inv_r = 1.0 / space.pair_rlen
        inv_s = np.where(nred, 1.0 / slen, 0.0)

        rows, cols, vals = [], [], []
        # column j: d1 path
        rows.append(pi)
        cols.append(pj)
        vals.append(cS * inv_r + cD * g1 * inv_r)
        # column i: -d1 path and -d2 path
        rows.append(pi)
        cols.append(pi)
        vals.append(-(cS + cD * g1) * inv_r - (cS + cD * g2) * inv_s)
        # mirror-stencil columns: d2 path
        for k in range(space.pair_sym_idx.shape[1]):
            w = space.pair_sym_w[:, k] * inv_s
            rows.append(pi)
            cols.append(idx[:, k])
            vals.append((cS + cD * g2) * w)
        grads[beta] = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(N, N)).tocsr()

    alpha = per[tracked[0]]
    Dalpha_parts = {tracked[0]: sp.identity(N, format="csr")}
    if len(tracked) > 1:
        sig = params.sigma_h(space.h_node)
        for beta in tracked[1:]:
            dx, dy = d_smooth_max(alpha, per[beta], sig)
            for b in Dalpha_parts:
                Dalpha_parts[b] = sp.diags(dx) @ Dalpha_parts[b]
            Dalpha_parts[beta] = sp.diags(dy)
            alpha = smooth_max(alpha, per[beta], sig)

    # assemble (N, N*m): column n*m+beta gets Dalpha_parts[beta] @ grads[beta]
    blocks = []
    for b2 in range(m):
        if b2 in per:
            blocks.append((Dalpha_parts[b2] @ grads[b2]).tocoo())
        else:
            blocks.append(None)
    rows, cols, vals = [], [], []
    for b2, blk in enumerate(blocks):
        if blk is None:
            continue
        rows.append(blk.row)
        cols.append(blk.col * m + b2)
        vals.append(blk.data)
    Dalpha = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N, N * m)).tocsr()

    hm = space.hanging_masters
    if space.num_hanging:
        a1, a2 = alpha[hm[:, 0]], alpha[hm[:, 1]]
        sig = params.sigma_h(np.minimum(space.h_node[hm[:, 0]], space.h_node[hm[:, 1]]))
        ah = smooth_max(a1, a2, sig)
        dh1, dh2 = d_smooth_max(a1, a2, sig)
    else:
        ah = np.zeros(0)
        dh1 = dh2 = np.zeros(0)
    fieldv = DetectorField(alpha=alpha, alpha_hanging=ah, variant=SMOOTH, per_component=per)
    return fieldv, Dalpha, (dh1, dh2)


# -- scalar nodal diffusion -----------------------------------------------------

def _pair_values(space: FESpace, K: sp.csr_matrix):
    """K_ij and K_ji over the unordered pair list; absent entries are
    structural zeros (exact cancellations scipy may prune)."""
    up = space.pair_i < space.pair_j
    pi, pj = space.pair_i[up], space.pair_j[up]
    kij = np.asarray(K[pi, pj]).ravel()
    kji = np.asarray(K[pj, pi]).ravel()
    return pi, pj, kij, kji


def scalar_diffusion(space: FESpace, K: sp.csr_matrix, alpha: np.ndarray,
                     params: StabilizationParams, variant=SHARP):
    """Nodal diffusion table over unordered pairs: (i, j, nu)."""
    pi, pj, kij, kji = _pair_values(space, K)
    ai, aj = alpha[pi], alpha[pj]
    if variant == SHARP:
        nu = np.maximum(np.maximum(ai * kij, 0.0), aj * kji)
    else:
        sig = params.sigma_h(np.minimum(space.h_node[pi], space.h_node[pj]))
        nu = smooth_max(smooth_max(ai * kij, aj * kji, sig), 0.0, sig)
    return pi, pj, nu


def scalar_diffusion_grad(space: FESpace, K: sp.csr_matrix, alpha: np.ndarray,
                          params: StabilizationParams):
    """Smooth-variant nu plus partials d(nu)/d(alpha_i), d(nu)/d(alpha_j)."""
    pi, pj, kij, kji = _pair_values(space, K)
    sig = params.sigma_h(np.minimum(space.h_node[pi], space.h_node[pj]))
    inner = smooth_max(alpha[pi] * kij, alpha[pj] * kji, sig)
    dwx, dwy = d_smooth_max(alpha[pi] * kij, alpha[pj] * kji, sig)
    douter, _ = d_smooth_max(inner, 0.0, sig)
    nu = smooth_max(inner, 0.0, sig)
    return pi, pj, nu, douter * dwx * kij, douter * dwy * kji


def stabilization_matrix(space: FESpace, pi, pj, nu, m: int = 1) -> sp.csr_matrix:
    """Graph-Laplacian stabilization matrix from an unordered pair table.

    Returned as the scalar (N x N) factor; expand with kron(I_m) for systems.
    """
    N = space.num_nodes
    rows = np.concatenate([pi, pj, pi, pj])
    cols = np.concatenate([pj, pi, pi, pj])
    vals = np.concatenate([-nu, -nu, nu, nu])
    B = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()
    B.sort_indices()
    return B


# -- elemental (system) diffusion -------------------------------------------------

@dataclass
class ElementPairTable:
    """Static per-(cell, pair) structure for the elemental diffusion.

    Correction slots follow the constraint sums: type A runs over hanging
    corners k with i among the masters (weight C_ki, vectors c_kj / c_jk),
    type B over k with j among the masters, type AB over k constrained by
    both i and j (vector c_kk), and type X over ordered pairs of distinct
    hanging corners (k1 constrained by i, k2 by j) whose cross coupling the
    constraint fold of the convection term also produces.
    """

    cell: np.ndarray
    i: np.ndarray
    j: np.ndarray
    c_ij: np.ndarray
    c_ji: np.ndarray
    a_w: np.ndarray     # (P, 2)
    a_k: np.ndarray     # (P, 2) hanging index or -1
    a_ckj: np.ndarray   # (P, 2, 2)
    a_cjk: np.ndarray
    b_w: np.ndarray
    b_k: np.ndarray
    b_cik: np.ndarray
    b_cki: np.ndarray
    ab_w: np.ndarray    # (P,)
    ab_k: np.ndarray
    ab_ckk: np.ndarray  # (P, 2)
    x_w: np.ndarray     # (P, 2)
    x_k1: np.ndarray    # (P, 2)
    x_k2: np.ndarray
    x_c12: np.ndarray   # (P, 2, 2)
    x_c21: np.ndarray


def _element_pair_table(space: FESpace) -> ElementPairTable:
    if getattr(space, "_elem_pair_table", None) is not None:
        return space._elem_pair_table
    cells, Is, Js = [], [], []
    c_ij, c_ji = [], []
    a_w, a_k, a_ckj, a_cjk = [], [], [], []
    b_w, b_k, b_cik, b_cki = [], [], [], []
    ab_w, ab_k, ab_ckk = [], [], []
    x_w, x_k1, x_k2, x_c12, x_c21 = [], [], [], [], []

    hx = space.cell_sizes[:, 0]
    hy = space.cell_sizes[:, 1]

    for ci in range(len(space.mesh.cells)):
        def cvec(sa, sb):
            if sa < 0 or sb < 0:
                return np.zeros(2)
            return np.array([CX[sa, sb] * hy[ci], CY[sa, sb] * hx[ci]])

        corner_slot = {}
        hang_here = []   # (hanging index, corner slot, masters)
        for k in range(4):
            v = space.cell_nodes[ci, k]
            if v < space.num_nodes:
                corner_slot[v] = k
            else:
                h = v - space.num_nodes
                hang_here.append((h, k, set(space.hanging_masters[h].tolist())))
                for s in range(2):
                    corner_slot.setdefault(space.hanging_masters[h, s], -1)
        # resolved node list; near masters may already be corners
        nodes = sorted(corner_slot)
        for p in range(len(nodes)):
            for qn in range(p + 1, len(nodes)):
                i, j = nodes[p], nodes[qn]
                si, sj = corner_slot[i], corner_slot[j]
                cells.append(ci)
                Is.append(i)
                Js.append(j)
                c_ij.append(cvec(si, sj))
                c_ji.append(cvec(sj, si))
                rowa = [(0.0, -1, np.zeros(2), np.zeros(2))] * 2
                rowb = [(0.0, -1, np.zeros(2), np.zeros(2))] * 2
                rowab = (0.0, -1, np.zeros(2))
                rowx = [(0.0, -1, -1, np.zeros(2), np.zeros(2))] * 2
                na = nb = nx = 0

                def weight_of(h, node):
                    return space.hanging_weights[h][
                        list(space.hanging_masters[h]).index(node)]

                # the three constraint sums are independent: a hanging corner
                # constrained by both i and j contributes to each of them
                for (h, sk, masters) in hang_here:
                    if i in masters:
                        rowa[na] = (weight_of(h, i), h, cvec(sk, sj), cvec(sj, sk))
                        na += 1
                    if j in masters:
                        rowb[nb] = (weight_of(h, j), h, cvec(si, sk), cvec(sk, si))
                        nb += 1
                    if i in masters and j in masters:
                        w = (space.hanging_weights[h, 0]
                             * space.hanging_weights[h, 1])
                        rowab = (w, h, cvec(sk, sk))
                # cross couplings between two distinct hanging corners
                for (h1, sk1, ms1) in hang_here:
                    for (h2, sk2, ms2) in hang_here:
                        if h1 == h2 or i not in ms1 or j not in ms2:
                            continue
                        rowx[nx] = (weight_of(h1, i) * weight_of(h2, j),
                                    h1, h2, cvec(sk1, sk2), cvec(sk2, sk1))
                        nx += 1
                a_w.append([rowa[0][0], rowa[1][0]])
                a_k.append([rowa[0][1], rowa[1][1]])
                a_ckj.append([rowa[0][2], rowa[1][2]])
                a_cjk.append([rowa[0][3], rowa[1][3]])
                b_w.append([rowb[0][0], rowb[1][0]])
                b_k.append([rowb[0][1], rowb[1][1]])
                b_cik.append([rowb[0][2], rowb[1][2]])
                b_cki.append([rowb[0][3], rowb[1][3]])
                ab_w.append(rowab[0])
                ab_k.append(rowab[1])
                ab_ckk.append(rowab[2])
                x_w.append([rowx[0][0], rowx[1][0]])
                x_k1.append([rowx[0][1], rowx[1][1]])
                x_k2.append([rowx[0][2], rowx[1][2]])
                x_c12.append([rowx[0][3], rowx[1][3]])
                x_c21.append([rowx[0][4], rowx[1][4]])

    table = ElementPairTable(
        cell=np.array(cells, dtype=np.int64),
        i=np.array(Is, dtype=np.int64),
        j=np.array(Js, dtype=np.int64),
        c_ij=np.array(c_ij), c_ji=np.array(c_ji),
        a_w=np.array(a_w), a_k=np.array(a_k, dtype=np.int64),
        a_ckj=np.array(a_ckj), a_cjk=np.array(a_cjk),
        b_w=np.array(b_w), b_k=np.array(b_k, dtype=np.int64),
        b_cik=np.array(b_cik), b_cki=np.array(b_cki),
        ab_w=np.array(ab_w), ab_k=np.array(ab_k, dtype=np.int64),
        ab_ckk=np.array(ab_ckk),
        x_w=np.array(x_w), x_k1=np.array(x_k1, dtype=np.int64),
        x_k2=np.array(x_k2, dtype=np.int64),
        x_c12=np.array(x_c12), x_c21=np.array(x_c21),
    )
    space._elem_pair_table = table
    return table


def _pair_roe(model: EulerGas, U, i_arr, j_arr):
    _, v_i, _, H_i, _ = euler_primitives(model, U[i_arr])
    rho_i = U[i_arr, 0]
    _, v_j, _, H_j, _ = euler_primitives(model, U[j_arr])
    rho_j = U[j_arr, 0]
    si, sj = np.sqrt(rho_i), np.sqrt(rho_j)
    t = 1.0 / (si + sj)
    v = (si[:, None] * v_i + sj[:, None] * v_j) * t[:, None]
    H = (si * H_i + sj * H_j) * t
    a = np.sqrt((model.gamma - 1.0) * (H - 0.5 * np.sum(v * v, axis=-1)))
    return v, a, H


def _lam(v, a, c, variant, eps):
    """Pair wave speed |v.c| + a|c| (optionally regularized)."""
    vc = np.einsum("...k,...k->...", v, c)
    nc = np.linalg.norm(c, axis=-1)
    if variant == SHARP:
        return np.abs(vc) + a * nc
    return abs_upper(vc, eps) + a * nc


def elemental_diffusion_all(space: FESpace, model: EulerGas, U,
                            alpha: DetectorField, params: StabilizationParams,
                            variant=SHARP):
    """nu^e for every (cell, pair); returns (table, nu, roe data) for reuse."""
    tab = _element_pair_table(space)
    v, a, _ = _pair_roe(model, U, tab.i, tab.j)
    eps = params.eps_h(space.cell_h[tab.cell])
    sig = params.sigma_h(space.cell_h[tab.cell])
    al_i = alpha.alpha[tab.i]
    al_j = alpha.alpha[tab.j]

    def mx(x, y):
        return np.maximum(x, y) if variant == SHARP else smooth_max(x, y, sig)

    nu = mx(al_i * _lam(v, a, tab.c_ij, variant, eps),
            al_j * _lam(v, a, tab.c_ji, variant, eps))
    if space.num_hanging:
        for s in range(2):
            live = tab.a_k[:, s] >= 0
            al_k = np.where(live, alpha.alpha_hanging[np.maximum(tab.a_k[:, s], 0)], 0.0)
            term = mx(al_k * _lam(v, a, tab.a_ckj[:, s], variant, eps),
                      al_j * _lam(v, a, tab.a_cjk[:, s], variant, eps))
            nu = nu + np.where(live, tab.a_w[:, s] * term, 0.0)
            live = tab.b_k[:, s] >= 0
            al_k = np.where(live, alpha.alpha_hanging[np.maximum(tab.b_k[:, s], 0)], 0.0)
            term = mx(al_i * _lam(v, a, tab.b_cik[:, s], variant, eps),
                      al_k * _lam(v, a, tab.b_cki[:, s], variant, eps))
            nu = nu + np.where(live, tab.b_w[:, s] * term, 0.0)
        live = tab.ab_k >= 0
        al_k = np.where(live, alpha.alpha_hanging[np.maximum(tab.ab_k, 0)], 0.0)
        nu = nu + np.where(live, tab.ab_w * al_k * _lam(v, a, tab.ab_ckk, variant, eps), 0.0)
        for s in range(2):
            live = tab.x_k1[:, s] >= 0
            al_1 = np.where(live, alpha.alpha_hanging[np.maximum(tab.x_k1[:, s], 0)], 0.0)
            al_2 = np.where(live, alpha.alpha_hanging[np.maximum(tab.x_k2[:, s], 0)], 0.0)
            term = mx(al_1 * _lam(v, a, tab.x_c12[:, s], variant, eps),
                      al_2 * _lam(v, a, tab.x_c21[:, s], variant, eps))
            nu = nu + np.where(live, tab.x_w[:, s] * term, 0.0)
    return tab, nu


def elemental_diffusion(space: FESpace, model: EulerGas, U,
                        alpha: DetectorField, ci: int,
                        params: StabilizationParams, variant=SHARP):
    """nu^e table for one cell as {(i, j): nu}, including the diagonal sums."""
    tab, nu = elemental_diffusion_all(space, model, U, alpha, params, variant)
    sel = tab.cell == ci
    out = {}
    diag = {}
    for i, j, v in zip(tab.i[sel], tab.j[sel], nu[sel]):
        out[(int(i), int(j))] = float(v)
        out[(int(j), int(i))] = float(v)
        diag[int(i)] = diag.get(int(i), 0.0) + float(v)
        diag[int(j)] = diag.get(int(j), 0.0) + float(v)
    for i, v in diag.items():
        out[(i, i)] = v
    return out


def system_stabilization_matrix(space: FESpace, model, U, alpha: DetectorField,
                                params: StabilizationParams, variant=SHARP):
    tab, nu = elemental_diffusion_all(space, model, U, alpha, params, variant)
    return stabilization_matrix(space, tab.i, tab.j, nu, model.m), (tab, nu)


# -- detector-weighted mass -------------------------------------------------------

def detector_mass(space: FESpace, M: sp.csr_matrix, alpha: np.ndarray,
                  params: StabilizationParams, variant=SHARP) -> sp.csr_matrix:
    """Row-sum-preserving blend between consistent and lumped mass."""
    Mc = M.tocsr(copy=True)
    Mc.sort_indices()
    rows = np.repeat(np.arange(space.num_nodes), np.diff(Mc.indptr))
    cols = Mc.indices
    if variant == SHARP:
        w = np.maximum(alpha[rows], alpha[cols])
    else:
        sig = params.sigma_h(np.minimum(space.h_node[rows], space.h_node[cols]))
        w = smooth_max(alpha[rows], alpha[cols], sig)
    lump = np.zeros(space.num_nodes)
    np.add.at(lump, rows, w * Mc.data)
    out = Mc.copy()
    out.data = (1.0 - w) * Mc.data
    return (out + sp.diags(lump)).tocsr()


# -- bounds verification ------------------------------------------------------------

def folded_gradient_products(space: FESpace):
    """Constraint-folded (grad phi_j, phi_i) vectors as two scalar matrices."""
    nv = space.num_nodes + space.num_hanging
    cn = space.cell_nodes
    hx = space.cell_sizes[:, 0]
    hy = space.cell_sizes[:, 1]
    rows = np.repeat(cn, 4, axis=1).reshape(-1)
    cols = np.tile(cn, (1, 4)).reshape(-1)
    bx = (CX[None, :, :] * hy[:, None, None]).reshape(-1)
    by = (CY[None, :, :] * hx[:, None, None]).reshape(-1)
    Cx = sp.coo_matrix((bx, (rows, cols)), shape=(nv, nv)).tocsr()
    Cy = sp.coo_matrix((by, (rows, cols)), shape=(nv, nv)).tocsr()
    Cx = (space.P.T @ Cx @ space.P).tocsr()
    Cy = (space.P.T @ Cy @ space.P).tocsr()
    return Cx, Cy


@dataclass
class BoundsReport:
    """Per-node verification of the local-bounds structure.

    For scalar problems dmp_slack is the Def-2.2 violation (<= tol means the
    nodal value sits inside its neighborhood envelope).  For systems,
    offdiag_max_eig holds, per flagged node, the largest eigenvalue among the
    pair-averaged operator blocks, and rowsum_norm the folded convection-row
    magnitude that the difference form relies on.
    """

    flagged_nodes: np.ndarray
    offdiag_max_eig: np.ndarray
    rowsum_norm: np.ndarray
    dmp_slack: np.ndarray | None = None

    def ok(self, tol=1e-10):
        checks = [self.offdiag_max_eig.size == 0 or self.offdiag_max_eig.max() <= tol,
                  self.rowsum_norm.size == 0 or self.rowsum_norm.max() <= tol]
        if self.dmp_slack is not None and self.dmp_slack.size:
            checks.append(self.dmp_slack.max() <= tol)
        return all(checks)


def verify_bounds(space: FESpace, model, U, alpha: DetectorField,
                  params: StabilizationParams, binfo=None,
                  K_bar: sp.csr_matrix | None = None, variant=SHARP,
                  alpha_tol=1e-12) -> BoundsReport:
    U = np.asarray(U).reshape(space.num_nodes, -1)
    N = space.num_nodes
    interior = ~space.on_boundary
    flagged = np.flatnonzero(alpha.alpha >= 1.0 - alpha_tol)

    if isinstance(model, ScalarTransport):
        u = U[:, 0]
        slack = np.full(N, -np.inf)
        free = ~binfo.dirichlet[:, 0] if binfo is not None else np.ones(N, dtype=bool)
        for i in np.flatnonzero(free):
            nb = space.neighborhood(i)
            nb = nb[nb != i]
            if len(nb) == 0:
                continue
            slack[i] = max(u[i] - u[nb].max(), u[nb].min() - u[i])
        off = np.zeros(0)
        rs = np.zeros(0)
        if K_bar is not None:
            off_list = []
            for i in flagged:
                r0, r1 = K_bar.indptr[i], K_bar.indptr[i + 1]
                mask = K_bar.indices[r0:r1] != i
                if mask.any():
                    off_list.append(K_bar.data[r0:r1][mask].max())
            off = np.array(off_list) if off_list else np.zeros(0)
            rows_sums = np.asarray(K_bar.sum(axis=1)).ravel()
            rs = np.abs(rows_sums[interior])
        return BoundsReport(flagged_nodes=flagged, offdiag_max_eig=off,
                            rowsum_norm=rs, dmp_slack=slack[free & np.isfinite(slack)])

    # system case: pair-averaged operator blocks at flagged nodes
    tab, nu = elemental_diffusion_all(space, model, U, alpha, params, variant)
    Cx, Cy = folded_gradient_products(space)
    Cx2 = Cx.tolil()
    Cy2 = Cy.tolil()
    nu_sum = {}
    for i, j, v in zip(tab.i, tab.j, nu):
        key = (int(i), int(j)) if i < j else (int(j), int(i))
        nu_sum[key] = nu_sum.get(key, 0.0) + float(v)
    from .physics import euler_jacobian_vH
    flagged_set = set(flagged.tolist())
    max_eigs = []
    for (i, j), nu_ij in nu_sum.items():
        if i not in flagged_set and j not in flagged_set:
            continue
        for (r, cidx) in ((i, j), (j, i)):
            if r not in flagged_set:
                continue
            c = np.array([Cx2[r, cidx], Cy2[r, cidx]])
            v, a, H = _pair_roe(model, U, np.array([r]), np.array([cidx]))
            A = euler_jacobian_vH(model.gamma, v[0], H[0], c) - nu_ij * np.eye(model.m)
            max_eigs.append(np.max(np.linalg.eigvals(A).real))
    rsx = np.asarray(Cx.sum(axis=1)).ravel()
    rsy = np.asarray(Cy.sum(axis=1)).ravel()
    rs = np.sqrt(rsx**2 + rsy**2)[interior]
    return BoundsReport(flagged_nodes=flagged,
                        offdiag_max_eig=np.array(max_eigs) if max_eigs else np.zeros(0),
                        rowsum_norm=rs)
