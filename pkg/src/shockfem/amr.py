"""Error indication, fixed-fraction marking, and the solve-estimate-mark-adapt loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fespace import build_space, transfer
from .mesh import COARSEN, KEEP, REFINE, adapt
from .solver import NonlinearConfig, steady_solve


@dataclass
class AmrConfig:
    refine_fraction: float = 0.3
    coarsen_fraction: float = 0.1
    max_cells: int = 50000
    max_steps: int = 30
    indicator: str = "graph"      # "graph" | "kelly"
    beta: int = 0                 # tracked component driving the indicator

    def __post_init__(self):
        if not (0 <= self.refine_fraction < 1 and 0 <= self.coarsen_fraction < 1):
            raise ValueError("fractions must lie in [0, 1)")
        if self.refine_fraction + self.coarsen_fraction > 1:
            raise ValueError("refine and coarsen fractions overlap")


def _cell_gradients(space, u_vertex):
    """Bilinear gradient coefficients per cell: du/dx at (bottom, top) edges
    and du/dy at (left, right) edges."""
    cn = space.cell_nodes
    hx = space.cell_sizes[:, 0]
    hy = space.cell_sizes[:, 1]
    u = u_vertex[cn]     # (ncell, 4) in SW, SE, NW, NE order
    ux_bottom = (u[:, 1] - u[:, 0]) / hx
    ux_top = (u[:, 3] - u[:, 2]) / hx
    uy_left = (u[:, 2] - u[:, 0]) / hy
    uy_right = (u[:, 3] - u[:, 1]) / hy
    return ux_bottom, ux_top, uy_left, uy_right


def _linear_sq_integral(ja, jb, length):
    """Exact integral of a linear function's square over a segment."""
    return length * (ja * ja + ja * jb + jb * jb) / 3.0


def kelly(space, U, beta: int = 0) -> np.ndarray:
    """Face-jump error estimator: eta_K^2 = (h_K/24) * integral of the squared
    normal-derivative jump over the cell boundary; hanging faces are
    integrated per fine sub-face against the coarse-side gradient."""
    mesh = space.mesh
    U = np.asarray(U).reshape(space.num_nodes, -1)
    uv = space.vertex_values(U[:, beta])
    ux_b, ux_t, uy_l, uy_r = _cell_gradients(space, uv)
    eta2 = np.zeros(len(mesh.cells))

    def ux_at(ci, y):
        r0 = space.cell_origin[ci, 1]
        t = (y - r0) / space.cell_sizes[ci, 1]
        return ux_b[ci] * (1 - t) + ux_t[ci] * t

    def uy_at(ci, x):
        r0 = space.cell_origin[ci, 0]
        t = (x - r0) / space.cell_sizes[ci, 0]
        return uy_l[ci] * (1 - t) + uy_r[ci] * t

    def add_face(ca, cb, vertical, lo, hi):
        if vertical:
            ja = ux_at(ca, lo) - ux_at(cb, lo)
            jb = ux_at(ca, hi) - ux_at(cb, hi)
        else:
            ja = uy_at(ca, lo) - uy_at(cb, lo)
            jb = uy_at(ca, hi) - uy_at(cb, hi)
        integral = _linear_sq_integral(ja, jb, hi - lo)
        eta2[ca] += space.cell_h[ca] / 24.0 * integral
        eta2[cb] += space.cell_h[cb] / 24.0 * integral

    idx = space.cell_index
    for cell in mesh.cells:
        ci = idx[cell]
        level, ix, iy = cell
        for side in ("E", "N"):
            same = (level, ix + 1, iy) if side == "E" else (level, ix, iy + 1)
            gx, gy = mesh.grid_dims(level)
            if 0 <= same[1] < gx and 0 <= same[2] < gy and same in mesh:
                cj = idx[same]
                r = mesh.cell_rect(cell)
                if side == "E":
                    add_face(ci, cj, True, r.y0, r.y1)
                else:
                    add_face(ci, cj, False, r.x0, r.x1)
        for side in ("E", "W", "N", "S"):
            children = mesh.edge_neighbor_children(cell, side)
            if children is None:
                continue
            for ch in children:
                cj = idx[ch]
                rch = mesh.cell_rect(ch)
                if side in ("E", "W"):
                    add_face(ci, cj, True, rch.y0, rch.y1)
                else:
                    add_face(ci, cj, False, rch.x0, rch.x1)
    return np.sqrt(eta2)


def graph_indicator(space, U, beta: int = 0) -> np.ndarray:
    """Per-cell sum of squared nodal differences over full neighborhoods.

    The d-2 mesh-size exponent is zero in 2D, so no h factor appears.
    """
    U = np.asarray(U).reshape(space.num_nodes, -1)
    u = U[:, beta]
    pi, pj = space.pair_i, space.pair_j
    s = np.zeros(space.num_nodes)
    np.add.at(s, pi, (u[pi] - u[pj]) ** 2)
    eta2 = np.zeros(len(space.mesh.cells))
    for ci in range(len(space.mesh.cells)):
        for v in space.cell_nodes[ci]:
            if v < space.num_nodes:
                eta2[ci] += s[v]
    return np.sqrt(eta2)


def mark(values: np.ndarray, cfg: AmrConfig, current_cells: int | None = None) -> dict:
    """Fixed-fraction marking; ties break toward lower cell index.

    Cells keyed positionally: the caller zips with mesh.cells.
    """
    n = len(values)
    order_hi = np.lexsort((np.arange(n), -values))
    order_lo = np.lexsort((np.arange(n), values))
    n_ref = int(np.ceil(cfg.refine_fraction * n))
    n_coa = int(np.floor(cfg.coarsen_fraction * n))
    if current_cells is not None and current_cells >= cfg.max_cells:
        n_ref = 0
    marks = np.full(n, KEEP, dtype=object)
    marks[order_lo[:n_coa]] = COARSEN
    marks[order_hi[:n_ref]] = REFINE
    return {k: m for k, m in enumerate(marks)}


@dataclass
class AmrRecord:
    step: int
    cells: int
    dofs: int
    l1_error: float
    wall_s: float
    nl_iters: int
    converged: bool
    mesh: object = None
    space: object = None
    U: np.ndarray | None = None
    indicator: np.ndarray | None = None


def amr_loop(case, amr_cfg: AmrConfig, solver_cfg: NonlinearConfig | None = None,
             keep_fields=True, on_step=None, stop_when=None):
    """Iterate solve -> estimate -> mark -> adapt until the step or cell cap.

    The case object provides initial_mesh(), model/m, make_problem(space),
    initial_guess(space) and optionally l1_error(space, U).  stop_when(record)
    may end the loop early (e.g. on reaching a target error).
    """
    solver_cfg = solver_cfg or NonlinearConfig()
    mesh = case.initial_mesh()
    space = build_space(mesh, m=case.model.m)
    U = case.initial_guess(space).reshape(-1)
    records = []
    step = 0
    while True:
        prob = case.make_problem(space)
        t0 = time.perf_counter()
        U, report = steady_solve(prob, U, solver_cfg)
        wall = time.perf_counter() - t0
        err = case.l1_error(space, U) if case.has_exact else float("nan")
        indicator_fn = kelly if amr_cfg.indicator == "kelly" else graph_indicator
        ind = indicator_fn(space, U, amr_cfg.beta)
        rec = AmrRecord(step=step, cells=len(mesh), dofs=space.num_nodes * case.model.m,
                        l1_error=err, wall_s=wall, nl_iters=report.iterations,
                        converged=report.converged,
                        mesh=mesh if keep_fields else None,
                        space=space if keep_fields else None,
                        U=U.copy() if keep_fields else None,
                        indicator=ind if keep_fields else None)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if stop_when is not None and stop_when(rec):
            break
        if step >= amr_cfg.max_steps or len(mesh) >= amr_cfg.max_cells:
            break
        marks_pos = mark(ind, amr_cfg, current_cells=len(mesh))
        marks = {cell: marks_pos[k] for k, cell in enumerate(mesh.cells)}
        new_mesh, mapping = adapt(mesh, marks)
        if new_mesh.cells == mesh.cells:
            break
        new_space = build_space(new_mesh, m=case.model.m)
        U = transfer(U.reshape(space.num_nodes, case.model.m), mapping,
                     space, new_space).reshape(-1)
        mesh, space = new_mesh, new_space
        step += 1
    return records
