"""Nonlinear solver: hybrid Picard-Newton with cubic backtracking line search.

The residual is R(U) = M~(U) dt_inv (U - U_prev) + K~(U) U - G with the
detector-weighted mass M~ and stabilized operator K~ = K + B~.  For the two
supported models K(U) U is the group-FEM flux divergence, whose exact
derivative is K(U) itself (degree-one homogeneity of the Euler flux), so the
Jacobian's extra terms come only from the detector and diffusion chains;
those are hand-coded below and validated against finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import CX, CY, BoundaryData, assemble_system, constrain_rows
from .fespace import FESpace
from .physics import (
    EulerGas,
    InadmissibleStateError,
    ScalarTransport,
    euler_jacobian_dir_derivative,
    euler_primitive_sensitivities,
    euler_primitives,
)
from .stabilization import (
    SMOOTH,
    DetectorField,
    StabilizationParams,
    abs_upper,
    d_abs_upper,
    d_smooth_max,
    detector_mass,
    detector_with_grad,
    elemental_diffusion_all,
    global_max_wave_speed,
    scalar_diffusion,
    scalar_diffusion_grad,
    smooth_max,
    stabilization_matrix,
    system_detector,
    system_stabilization_matrix,
)

LINE_SEARCH_C = 1e-4
LINE_SEARCH_LAMBDA_MIN = 1e-4
LINE_SEARCH_MAX_BACKTRACKS = 10


class LinearSolverError(RuntimeError):
    pass


class NonConvergedError(RuntimeError):
    def __init__(self, message, U, report):
        super().__init__(message)
        self.U = U
        self.report = report


@dataclass
class NonlinearConfig:
    tol1: float = 1e-2          # Picard -> Newton switch, relative residual
    tol2: float = 1e-8          # final relative residual
    du_tol: float = 1e-4        # relative increment stopping rule
    max_iters: int = 500        # total across both phases
    dt: float | None = None     # None = steady
    linear_solver: str = "direct"
    raise_on_failure: bool = False
    # hand over to Newton when Picard's contraction degenerates; without this
    # a plateaued Picard phase can burn the whole iteration budget
    stall_window: int = 10
    stall_contraction: float = 0.9

    def __post_init__(self):
        if not (self.tol1 > self.tol2 > 0):
            raise ValueError("need tol1 > tol2 > 0")


@dataclass
class ResidualReport:
    res_norms: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)
    picard_iters: int = 0
    newton_iters: int = 0
    converged: bool = False
    stop_reason: str = ""

    @property
    def iterations(self):
        return self.picard_iters + self.newton_iters

    @property
    def rel_norms(self):
        r0 = self.res_norms[0] if self.res_norms else 1.0
        return [r / r0 for r in self.res_norms]


@dataclass
class DiscreteProblem:
    """Everything a nonlinear solve needs besides the iterate itself."""

    space: FESpace
    model: object
    params: StabilizationParams
    bc: BoundaryData
    scheme: str = "high"          # "high" = detector-modulated, "low" = full diffusion
    variant: str = SMOOTH
    tracked: tuple = (0,)
    source: object = None
    frozen_alpha: np.ndarray | None = None   # test hook: bypass the detector
    lam_max_frozen: bool = False             # keep sigma_h fixed inside a linear solve

    def detector_zero_mask(self, binfo):
        mask = np.zeros_like(binfo.dirichlet)
        for b in self.tracked:
            mask[:, b] = binfo.dirichlet[:, b]
        return mask


def _ones_field(space):
    return DetectorField(alpha=np.ones(space.num_nodes),
                        alpha_hanging=np.ones(space.num_hanging))


def _expand(B_sc: sp.csr_matrix, m: int) -> sp.csr_matrix:
    if m == 1:
        return B_sc.tocsr()
    return sp.kron(B_sc, sp.identity(m, format="csr"), format="csr")


def assemble_once(prob: DiscreteProblem, U: np.ndarray):
    """Galerkin matrices at the iterate (shared by residual/LHS variants).

    A one-slot memo keyed by the iterate's bytes avoids re-assembling the
    accepted line-search probe at the start of the next iteration.
    """
    space, model = prob.space, prob.model
    U = U.reshape(space.num_nodes, model.m)
    if not prob.lam_max_frozen:
        prob.params.lam_max = max(global_max_wave_speed(space, model, U), 1e-300)
    key = U.tobytes()
    memo = getattr(prob, "_asm_memo", None)
    if memo is not None and memo[0] == key:
        return memo[1]
    asm = assemble_system(space, model, U, prob.bc, prob.source)
    prob._asm_memo = (key, asm)
    return asm


def build_operators(prob: DiscreteProblem, U: np.ndarray, *, force_full_diffusion=False,
                    with_grad=False, assembled=None):
    """Assemble (M, K~, G, binfo) plus detector data at the current iterate."""
    space, model = prob.space, prob.model
    m = model.m
    U = U.reshape(space.num_nodes, m)
    if assembled is None:
        assembled = assemble_once(prob, U)
    M, K, G, binfo = assembled

    grad_data = None
    frozen = prob.scheme == "low" or force_full_diffusion or prob.frozen_alpha is not None
    if prob.scheme == "low" or force_full_diffusion:
        alpha = _ones_field(space)
        Dalpha = None
    elif prob.frozen_alpha is not None:
        alpha = DetectorField(alpha=prob.frozen_alpha.copy(),
                              alpha_hanging=_hanging_max(space, prob.frozen_alpha))
        Dalpha = None
    elif with_grad:
        alpha, Dalpha, _ = detector_with_grad(
            space, U, prob.tracked, prob.params,
            zero_mask=prob.detector_zero_mask(binfo))
    else:
        alpha = system_detector(space, U, prob.tracked, prob.params, prob.variant,
                                zero_mask=prob.detector_zero_mask(binfo))
        Dalpha = None

    if isinstance(model, ScalarTransport):
        if with_grad and Dalpha is not None:
            pi, pj, nu, gi, gj = scalar_diffusion_grad(space, K, alpha.alpha, prob.params)
            grad_data = ("scalar", pi, pj, gi, gj, Dalpha)
        else:
            pi, pj, nu = scalar_diffusion(space, K, alpha.alpha, prob.params, prob.variant)
        B_sc = stabilization_matrix(space, pi, pj, nu)
    else:
        if with_grad:
            # frozen detectors still leave the pair-averaged wave speeds
            # state-dependent, so the Roe chain is always kept
            if Dalpha is None:
                Dalpha = sp.csr_matrix((space.num_nodes, space.num_nodes * m))
            B_sc, tab_nu, parts = _euler_diffusion_grad(prob, U, alpha)
            grad_data = ("euler", tab_nu, parts, Dalpha)
        else:
            B_sc, _ = system_stabilization_matrix(space, model, U, alpha,
                                                  prob.params, prob.variant)
    K_tilde = (K + _expand(B_sc, m)).tocsr()
    return M, K_tilde, G, binfo, alpha, grad_data


def residual(prob: DiscreteProblem, U, U_prev=None, dt=None, operators=None):
    """Stabilized residual with Dirichlet rows zeroed (iterates satisfy the BC)."""
    space, m = prob.space, prob.model.m
    U = U.reshape(space.num_nodes, m)
    if operators is None:
        operators = build_operators(prob, U)
    M, K_tilde, G, binfo, alpha, _ = operators
    R = (K_tilde @ U.reshape(-1) - G).reshape(space.num_nodes, m)
    if dt is not None:
        Mt = detector_mass(space, M, alpha.alpha, prob.params, prob.variant)
        R += (Mt @ (U - U_prev.reshape(space.num_nodes, m))) / dt
    # fixed rows carry the plain constraint residual, making the identity
    # rows of the constrained Jacobian exact
    R[binfo.dirichlet] = (U - binfo.values)[binfo.dirichlet]
    return R.reshape(-1)


def _hanging_max(space, alpha):
    if space.num_hanging == 0:
        return np.zeros(0)
    hm = space.hanging_masters
    return np.maximum(alpha[hm[:, 0]], alpha[hm[:, 1]])


# -- Euler diffusion with derivative bookkeeping --------------------------------

def _roe_partials(model: EulerGas, U, i_arr, j_arr):
    """Roe-average (v, a) and their partials w.r.t. both endpoint states."""
    g = model.gamma
    out = {}
    rho_i = U[i_arr, 0]
    rho_j = U[j_arr, 0]
    _, v_i, _, H_i, _ = euler_primitives(model, U[i_arr])
    _, v_j, _, H_j, _ = euler_primitives(model, U[j_arr])
    si, sj = np.sqrt(rho_i), np.sqrt(rho_j)
    t = 1.0 / (si + sj)
    v = (si[:, None] * v_i + sj[:, None] * v_j) * t[:, None]
    H = (si * H_i + sj * H_j) * t
    a = np.sqrt((g - 1.0) * (H - 0.5 * np.sum(v * v, axis=-1)))

    def side(rho, vv, HH, ss, Us):
        P = len(rho)
        dv = np.zeros((P, 2, 4))     # d v_side / d u_side
        dv[:, 0, 0] = -vv[:, 0] / rho
        dv[:, 1, 0] = -vv[:, 1] / rho
        dv[:, 0, 1] = 1.0 / rho
        dv[:, 1, 2] = 1.0 / rho
        dH = np.zeros((P, 4))
        m2 = Us[:, 1] ** 2 + Us[:, 2] ** 2
        dH[:, 0] = -g * Us[:, 3] / rho**2 + (g - 1.0) * m2 / rho**3
        dH[:, 1] = -(g - 1.0) * Us[:, 1] / rho**2
        dH[:, 2] = -(g - 1.0) * Us[:, 2] / rho**2
        dH[:, 3] = g / rho
        ds = np.zeros((P, 4))
        ds[:, 0] = 0.5 / ss
        # roe chain
        dvroe = ss[:, None, None] * dv * t[:, None, None] \
            + ds[:, None, :] * (vv - v)[:, :, None] * t[:, None, None]
        dHroe = ss[:, None] * dH * t[:, None] + ds * (HH - H)[:, None] * t[:, None]
        daroe = (g - 1.0) * (dHroe - np.einsum("pk,pkc->pc", v, dvroe)) / (2.0 * a[:, None])
        return dvroe, daroe

    out["v"], out["a"] = v, a
    out["dv_i"], out["da_i"] = side(rho_i, v_i, H_i, si, U[i_arr])
    out["dv_j"], out["da_j"] = side(rho_j, v_j, H_j, sj, U[j_arr])
    return out


def _euler_diffusion_grad(prob: DiscreteProblem, U, alpha: DetectorField):
    """Smooth elemental diffusion, its matrix, and per-pair derivative data.

    parts = (d_alpha_rows, d_alpha_cols, d_alpha_vals, dnu_dui, dnu_duj)
    where the alpha-derivative triplets map (pair p, conforming node) ->
    d nu_p / d alpha_node, already pushed through the hanging-node chain.
    """
    from .stabilization import _element_pair_table, _lam

    space, model, params = prob.space, prob.model, prob.params
    tab = _element_pair_table(space)
    roe = _roe_partials(model, U, tab.i, tab.j)
    v, a = roe["v"], roe["a"]
    P = len(tab.i)
    eps = params.eps_h(space.cell_h[tab.cell])
    sig = params.sigma_h(space.cell_h[tab.cell])
    hm = space.hanging_masters

    if space.num_hanging:
        a1 = alpha.alpha[hm[:, 0]]
        a2 = alpha.alpha[hm[:, 1]]
        sig_h = params.sigma_h(np.minimum(space.h_node[hm[:, 0]], space.h_node[hm[:, 1]]))
        dh1, dh2 = d_smooth_max(a1, a2, sig_h)
    else:
        dh1 = dh2 = np.zeros(0)

    nu = np.zeros(P)
    dnu_dui = np.zeros((P, 4))
    dnu_duj = np.zeros((P, 4))
    arows, acols, avals = [], [], []

    def lam_and_grad(c):
        vc = np.einsum("pk,pk->p", v, c)
        nc = np.linalg.norm(c, axis=-1)
        lam = abs_upper(vc, eps) + a * nc
        dvc = d_abs_upper(vc, eps)
        dl_dui = dvc[:, None] * np.einsum("pk,pkc->pc", c, roe["dv_i"]) \
            + nc[:, None] * roe["da_i"]
        dl_duj = dvc[:, None] * np.einsum("pk,pkc->pc", c, roe["dv_j"]) \
            + nc[:, None] * roe["da_j"]
        return lam, dl_dui, dl_duj

    def add_alpha(nodes, vals):
        arows.append(np.arange(P))
        acols.append(nodes)
        avals.append(vals)

    def add_alpha_hanging(hidx, vals, live):
        h = np.maximum(hidx, 0)
        for s, dws in ((0, dh1), (1, dh2)):
            add_alpha(np.where(live, hm[h, s], 0),
                      np.where(live, vals * dws[h], 0.0))

    def accumulate(term_live, weight, al_x, lam_x, dlx, al_y, lam_y, dly,
                   x_is_hang, x_idx, y_is_hang, y_idx):
        """weight * smooth_max(al_x * lam_x, al_y * lam_y) and its chain."""
        nonlocal nu, dnu_dui, dnu_duj
        wx_arg = al_x * lam_x
        wy_arg = al_y * lam_y
        val = smooth_max(wx_arg, wy_arg, sig)
        gx, gy = d_smooth_max(wx_arg, wy_arg, sig)
        w = np.where(term_live, weight, 0.0)
        nu += w * val
        dnu_dui += (w * (gx * al_x))[:, None] * dlx[0] + (w * (gy * al_y))[:, None] * dly[0]
        dnu_duj += (w * (gx * al_x))[:, None] * dlx[1] + (w * (gy * al_y))[:, None] * dly[1]
        if x_is_hang:
            add_alpha_hanging(x_idx, w * gx * lam_x, term_live & (x_idx >= 0))
        else:
            add_alpha(x_idx, w * gx * lam_x)
        if y_is_hang:
            add_alpha_hanging(y_idx, w * gy * lam_y, term_live & (y_idx >= 0))
        else:
            add_alpha(y_idx, w * gy * lam_y)

    al_i = alpha.alpha[tab.i]
    al_j = alpha.alpha[tab.j]
    true_all = np.ones(P, dtype=bool)

    lam_ij, *d_ij = lam_and_grad(tab.c_ij)
    lam_ji, *d_ji = lam_and_grad(tab.c_ji)
    accumulate(true_all, np.ones(P), al_i, lam_ij, d_ij, al_j, lam_ji, d_ji,
               False, tab.i, False, tab.j)

    if space.num_hanging:
        ah = alpha.alpha_hanging

        def ah_of(idx):
            return np.where(idx >= 0, ah[np.maximum(idx, 0)], 0.0)

        for s in range(2):
            live = tab.a_k[:, s] >= 0
            lam_kj, *d_kj = lam_and_grad(tab.a_ckj[:, s])
            lam_jk, *d_jk = lam_and_grad(tab.a_cjk[:, s])
            accumulate(live, tab.a_w[:, s], ah_of(tab.a_k[:, s]), lam_kj, d_kj,
                       al_j, lam_jk, d_jk, True, tab.a_k[:, s], False, tab.j)
            live = tab.b_k[:, s] >= 0
            lam_ik, *d_ik = lam_and_grad(tab.b_cik[:, s])
            lam_ki, *d_ki = lam_and_grad(tab.b_cki[:, s])
            accumulate(live, tab.b_w[:, s], al_i, lam_ik, d_ik,
                       ah_of(tab.b_k[:, s]), lam_ki, d_ki,
                       False, tab.i, True, tab.b_k[:, s])
            live = tab.x_k1[:, s] >= 0
            lam_12, *d_12 = lam_and_grad(tab.x_c12[:, s])
            lam_21, *d_21 = lam_and_grad(tab.x_c21[:, s])
            accumulate(live, tab.x_w[:, s], ah_of(tab.x_k1[:, s]), lam_12, d_12,
                       ah_of(tab.x_k2[:, s]), lam_21, d_21,
                       True, tab.x_k1[:, s], True, tab.x_k2[:, s])
        # plain product term: w * alpha_k * lam_kk
        live = tab.ab_k >= 0
        lam_kk, dkk_i, dkk_j = lam_and_grad(tab.ab_ckk)
        alk = ah_of(tab.ab_k)
        w = np.where(live, tab.ab_w, 0.0)
        nu += w * alk * lam_kk
        dnu_dui += (w * alk)[:, None] * dkk_i
        dnu_duj += (w * alk)[:, None] * dkk_j
        add_alpha_hanging(tab.ab_k, w * lam_kk, live)

    B_sc = stabilization_matrix(space, tab.i, tab.j, nu)
    d_alpha = sp.coo_matrix(
        (np.concatenate(avals), (np.concatenate(arows), np.concatenate(acols))),
        shape=(P, space.num_nodes)).tocsr()
    return B_sc, (tab, nu), (d_alpha, dnu_dui, dnu_duj)


# -- Jacobian -------------------------------------------------------------------

def _hanging_trial_occurrences(space: FESpace):
    """Static (hanging trial corner, folded test row, weight, c-vector) list.

    At a hanging trial slot the group flux coefficient is
    (sum_m C f'(u_m)) u~ with u~ != u_m, so differentiating it produces a
    flux-Hessian term that the plain convection matrix misses.
    """
    cached = getattr(space, "_hang_trial_occ", None)
    if cached is not None:
        return cached
    occ_h, occ_row, occ_w, occ_c = [], [], [], []
    hx = space.cell_sizes[:, 0]
    hy = space.cell_sizes[:, 1]
    for ci in range(len(space.mesh.cells)):
        for b4 in range(4):
            v = space.cell_nodes[ci, b4]
            if v < space.num_nodes:
                continue
            h = v - space.num_nodes
            for a4 in range(4):
                c = (CX[b4, a4] * hy[ci], CY[b4, a4] * hx[ci])
                for s in range(2):
                    ra = space.resolve_idx[ci, a4, s]
                    wa = space.resolve_w[ci, a4, s]
                    if ra >= 0 and wa > 0:
                        occ_h.append(h)
                        occ_row.append(ra)
                        occ_w.append(wa)
                        occ_c.append(c)
    cached = (np.array(occ_h, dtype=np.int64), np.array(occ_row, dtype=np.int64),
              np.array(occ_w), np.array(occ_c).reshape(-1, 2))
    space._hang_trial_occ = cached
    return cached


def _hanging_flux_extra(prob: DiscreteProblem, U):
    """Jacobian correction for constrained flux coefficients at hanging trial
    slots (Euler only; identically zero without hanging nodes)."""
    space, model = prob.space, prob.model
    m = model.m
    occ_h, occ_row, occ_w, occ_c = _hanging_trial_occurrences(space)
    if len(occ_h) == 0:
        return None
    U = U.reshape(space.num_nodes, m)
    hm = space.hanging_masters
    hw = space.hanging_weights
    u_tilde = hw[:, 0, None] * U[hm[:, 0]] + hw[:, 1, None] * U[hm[:, 1]]
    v, H, dv, dH = euler_primitive_sensitivities(model.gamma, U)
    rows, cols, vals = [], [], []
    for s in range(2):
        mast = hm[occ_h, s]
        DA = euler_jacobian_dir_derivative(
            model.gamma, v[mast], H[mast], dv[mast], dH[mast],
            occ_c, u_tilde[occ_h])
        blocks = -(occ_w * hw[occ_h, s])[:, None, None] * DA
        nb = len(occ_h)
        rr = (occ_row[:, None, None] * m + np.arange(m)[None, :, None])
        cc = (mast[:, None, None] * m + np.arange(m)[None, None, :])
        rows.append(np.broadcast_to(rr, (nb, m, m)).reshape(-1))
        cols.append(np.broadcast_to(cc, (nb, m, m)).reshape(-1))
        vals.append(blocks.reshape(-1))
    N = space.num_nodes
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(N * m, N * m)).tocsr()


def _mass_extra(prob, M, alpha, Dalpha, dtU):
    """d/dU of the detector-weighted mass term applied to dtU."""
    space = prob.space
    m = prob.model.m
    Mc = M.tocsr()
    Mc.sort_indices()
    rows = np.repeat(np.arange(space.num_nodes), np.diff(Mc.indptr))
    cols = Mc.indices
    sig = prob.params.sigma_h(np.minimum(space.h_node[rows], space.h_node[cols]))
    dwi, dwj = d_smooth_max(alpha.alpha[rows], alpha.alpha[cols], sig)
    dtU = dtU.reshape(space.num_nodes, m)
    # (M~ dtU)_{i,b} = sum_j [(1-w_ij) M_ij + delta_ij sum_k w_ik M_ik] dtU_{j,b}
    # d/d alpha_a picks up -dw M_ij dtU_j + dw M_ij dtU_i on the diagonal path
    diff = dtU[rows] - dtU[cols]          # (nnz, m) of dtU_i - dtU_j
    w_rows, w_cols, w_vals = [], [], []
    for b in range(m):
        vals_i = dwi * Mc.data * diff[:, b]
        vals_j = dwj * Mc.data * diff[:, b]
        w_rows.append(rows * m + b)
        w_cols.append(rows)
        w_vals.append(vals_i)
        w_rows.append(rows * m + b)
        w_cols.append(cols)
        w_vals.append(vals_j)
    W = sp.coo_matrix((np.concatenate(w_vals),
                       (np.concatenate(w_rows), np.concatenate(w_cols))),
                      shape=(space.num_nodes * m, space.num_nodes)).tocsr()
    return W @ Dalpha


def jacobian(prob: DiscreteProblem, U, U_prev=None, dt=None, operators=None):
    """Exact derivative of the smooth-variant residual."""
    space, m = prob.space, prob.model.m
    N = space.num_nodes
    U = U.reshape(N, m)
    if operators is None:
        operators = build_operators(prob, U, with_grad=True)
    M, K_tilde, G, binfo, alpha, grad_data = operators

    J = K_tilde.copy()
    if grad_data is not None:
        if grad_data[0] == "scalar":
            _, pi, pj, gi, gj, Dalpha = grad_data
            du = (U[pi] - U[pj]).reshape(-1)
            Pn = len(pi)
            rows = np.concatenate([pi, pi, pj, pj])
            cols = np.concatenate([pi, pj, pi, pj])
            vals = np.concatenate([du * gi, du * gj, -du * gi, -du * gj])
            W = sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()
            J = J + W @ Dalpha
        else:
            _, (tab, nu), (d_alpha, dnu_dui, dnu_duj), Dalpha = grad_data
            Pn = len(tab.i)
            dU_pair = U[tab.i] - U[tab.j]          # (P, m)
            # detector chain: rows (i|j, b) x pair
            rw, cl, vl = [], [], []
            for b in range(m):
                rw.append(tab.i * m + b)
                cl.append(np.arange(Pn))
                vl.append(dU_pair[:, b])
                rw.append(tab.j * m + b)
                cl.append(np.arange(Pn))
                vl.append(-dU_pair[:, b])
            Rw = sp.coo_matrix((np.concatenate(vl), (np.concatenate(rw), np.concatenate(cl))),
                               shape=(N * m, Pn)).tocsr()
            J = J + Rw @ (d_alpha @ Dalpha)
            # roe chain: dense per-pair blocks
            rw, cl, vl = [], [], []
            for b in range(m):
                for g in range(m):
                    for (rnode, sgn) in ((tab.i, 1.0), (tab.j, -1.0)):
                        rw.append(rnode * m + b)
                        cl.append(tab.i * m + g)
                        vl.append(sgn * dU_pair[:, b] * dnu_dui[:, g])
                        rw.append(rnode * m + b)
                        cl.append(tab.j * m + g)
                        vl.append(sgn * dU_pair[:, b] * dnu_duj[:, g])
            J = J + sp.coo_matrix(
                (np.concatenate(vl), (np.concatenate(rw), np.concatenate(cl))),
                shape=(N * m, N * m)).tocsr()
            extra = _hanging_flux_extra(prob, U)
            if extra is not None:
                J = J + extra

    if dt is not None:
        Mt = detector_mass(space, M, alpha.alpha, prob.params, prob.variant)
        J = J + _expand(Mt, m) / dt
        if grad_data is not None:
            Dalpha = grad_data[5] if grad_data[0] == "scalar" else grad_data[3]
            dtU = (U - U_prev.reshape(N, m)) / dt
            J = J + _mass_extra(prob, M, alpha, Dalpha, dtU.reshape(-1))

    return constrain_rows(J.tocsr(), binfo.dirichlet.reshape(-1)), binfo


def linear_solve(A: sp.csr_matrix, b: np.ndarray, method="direct",
                 rel_tol=1e-10) -> np.ndarray:
    bn = np.linalg.norm(b)
    if bn == 0.0:
        return np.zeros_like(b)
    if method == "direct":
        try:
            x = spla.splu(A.tocsc()).solve(b)
        except RuntimeError as err:
            raise LinearSolverError(f"direct factorization failed: {err}") from err
    elif method == "iterative":
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
        pre = spla.LinearOperator(A.shape, ilu.solve)
        x, info = spla.gmres(A, b, M=pre, rtol=1e-12, atol=0.0, restart=100,
                             maxiter=400)
        if info != 0:
            raise LinearSolverError(f"gmres failed to converge (info={info})")
    else:
        raise ValueError(f"unknown linear solver {method!r}")
    if np.linalg.norm(A @ x - b) > rel_tol * bn:
        raise LinearSolverError("linear solve exceeded residual tolerance")
    return x


def line_search(res_norm_fn, U, dU, r0: float, lam_start: float = 1.0):
    """Cubic backtracking on |R|: accept when |R(U + l dU)| <= (1 - c l)|R(U)|.

    Falls back to the best probed step (>= LAMBDA_MIN) when sufficient
    decrease is unreachable.  Returns (lambda, history of (lambda, |R|)).
    """
    if r0 == 0.0:
        return 1.0, [(1.0, 0.0)]
    f0 = r0 * r0
    fp0 = -2.0 * f0           # slope for an exact Newton direction
    lam = float(np.clip(lam_start, LINE_SEARCH_LAMBDA_MIN, 1.0))
    history = []
    prev = None               # (lam, f)
    for _ in range(LINE_SEARCH_MAX_BACKTRACKS + 1):
        r = res_norm_fn(U + lam * dU)
        history.append((lam, r))
        if r <= (1.0 - LINE_SEARCH_C * lam) * r0:
            return lam, history
        if not np.isfinite(r):
            lam = 0.5 * lam
            if lam < LINE_SEARCH_LAMBDA_MIN:
                break
            continue
        f = r * r
        if prev is None:
            # quadratic model through f0, fp0, f(lam)
            denom = 2.0 * (f - f0 - fp0 * lam)
            lam_new = -fp0 * lam * lam / denom if denom > 0 else 0.5 * lam
        else:
            lam_prev, f_prev = prev
            # cubic model through f0, fp0 and the last two probes
            d1 = f - f0 - fp0 * lam
            d2 = f_prev - f0 - fp0 * lam_prev
            det = lam**2 * lam_prev**2 * (lam - lam_prev)
            a3 = (lam_prev**2 * d1 - lam**2 * d2) / det
            b3 = (-lam_prev**3 * d1 + lam**3 * d2) / det
            disc = b3 * b3 - 3.0 * a3 * fp0
            if abs(a3) < 1e-30 or disc < 0:
                lam_new = 0.5 * lam
            else:
                lam_new = (-b3 + np.sqrt(disc)) / (3.0 * a3)
        prev = (lam, f)
        lam = float(np.clip(lam_new, 0.1 * lam, 0.5 * lam))
        if lam < LINE_SEARCH_LAMBDA_MIN:
            lam = LINE_SEARCH_LAMBDA_MIN
            break
    r = res_norm_fn(U + lam * dU)
    history.append((lam, r))
    best = min(history, key=lambda t: t[1])
    return max(best[0], LINE_SEARCH_LAMBDA_MIN), history


def picard_step(prob: DiscreteProblem, U, U_prev=None, dt=None, cfg=None):
    """One modified Picard increment: full-diffusion operator on the left,
    true-detector residual on the right."""
    cfg = cfg or NonlinearConfig()
    space, m = prob.space, prob.model.m
    asm = assemble_once(prob, U)
    ops_true = build_operators(prob, U, assembled=asm)
    R = residual(prob, U, U_prev, dt, operators=ops_true)
    M_l, K_l, _, binfo, alpha_l, _ = build_operators(
        prob, U, assembled=asm, force_full_diffusion=True)
    A = K_l
    if dt is not None:
        Mt = detector_mass(space, M_l, alpha_l.alpha, prob.params, prob.variant)
        A = A + _expand(Mt, m) / dt
    A = constrain_rows(A.tocsr(), binfo.dirichlet.reshape(-1))
    dU = linear_solve(A, -R, cfg.linear_solver)
    return dU, R


def hybrid_solve(prob: DiscreteProblem, U0: np.ndarray, cfg: NonlinearConfig | None = None):
    """Picard until tol1, then Newton until tol2 or the increment criterion."""
    cfg = cfg or NonlinearConfig()
    space, m = prob.space, prob.model.m
    report = ResidualReport()

    _, _, _, binfo, _, _ = build_operators(prob, U0)
    U = U0.reshape(space.num_nodes, m).copy()
    U[binfo.dirichlet] = binfo.values[binfo.dirichlet]
    U = U.reshape(-1)
    assemble_once(prob, U)   # refresh the wave-speed scale at the BC-consistent state

    def rnorm(V):
        was = prob.lam_max_frozen
        prob.lam_max_frozen = True
        try:
            return float(np.linalg.norm(residual(prob, V, U_prev=prob._uprev, dt=cfg.dt)))
        except InadmissibleStateError:
            # overshooting probes (vacuum states) read as infinitely bad
            return np.inf
        finally:
            prob.lam_max_frozen = was

    prob._uprev = getattr(prob, "_uprev", None)
    r = rnorm(U)
    report.res_norms.append(r)
    r0 = r if r > 0 else 1.0

    lam_prev = 1.0
    while r / r0 >= cfg.tol1 and report.iterations < cfg.max_iters:
        dU, R = picard_step(prob, U, prob._uprev, cfg.dt, cfg)
        lam, hist = line_search(rnorm, U, dU, r, lam_start=min(1.0, 2.0 * lam_prev))
        U = U + lam * dU
        r = hist[-1][1] if hist[-1][0] == lam else rnorm(U)
        report.res_norms.append(r)
        report.lambdas.append(lam)
        report.picard_iters += 1
        lam_prev = lam
        w = cfg.stall_window
        if report.picard_iters >= 2 * w:
            rn = report.res_norms
            contraction = (rn[-1] / rn[-1 - w]) ** (1.0 / w)
            if contraction > cfg.stall_contraction:
                break   # hand the plateau over to Newton

    while r / r0 >= cfg.tol2 and report.iterations < cfg.max_iters:
        ops = build_operators(prob, U, with_grad=True)
        R = residual(prob, U, prob._uprev, cfg.dt, operators=ops)
        J, binfo = jacobian(prob, U, prob._uprev, cfg.dt, operators=ops)
        dU = linear_solve(J, -R, cfg.linear_solver)
        lam, hist = line_search(rnorm, U, dU, r)
        U = U + lam * dU
        r = hist[-1][1] if hist[-1][0] == lam else rnorm(U)
        report.res_norms.append(r)
        report.lambdas.append(lam)
        report.newton_iters += 1
        # increment test on the full proposed step: a damped lambda must not
        # masquerade as convergence
        du_rel = np.linalg.norm(dU) / max(np.linalg.norm(U), 1e-300)
        if du_rel < cfg.du_tol:
            report.stop_reason = "increment"
            break

    if r / r0 < cfg.tol2:
        report.converged = True
        report.stop_reason = report.stop_reason or "residual"
    elif report.stop_reason == "increment":
        report.converged = True
    elif report.iterations >= cfg.max_iters:
        report.stop_reason = "max_iterations"
        if cfg.raise_on_failure:
            raise NonConvergedError("nonlinear solve hit the iteration cap", U, report)
    return U, report


def be_step(prob: DiscreteProblem, U_n: np.ndarray, dt: float,
            cfg: NonlinearConfig | None = None):
    """One backward-Euler step of the transient problem."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    cfg = cfg or NonlinearConfig()
    base = NonlinearConfig(tol1=cfg.tol1, tol2=cfg.tol2, du_tol=cfg.du_tol,
                           max_iters=cfg.max_iters, dt=dt,
                           linear_solver=cfg.linear_solver,
                           raise_on_failure=cfg.raise_on_failure)
    prob._uprev = U_n.reshape(-1).copy()
    try:
        U, report = hybrid_solve(prob, U_n.copy(), base)
    finally:
        prob._uprev = None
    return U, report


def steady_solve(prob: DiscreteProblem, U0: np.ndarray,
                 cfg: NonlinearConfig | None = None):
    cfg = cfg or NonlinearConfig()
    if cfg.dt is not None:
        raise ValueError("steady solve must not carry a time step")
    prob._uprev = None
    return hybrid_solve(prob, U0, cfg)
