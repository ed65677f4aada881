"""Q1 nodal finite-element space on the adaptive mesh.

Vertices get a unified numbering: conforming nodes first (these carry degrees
of freedom), hanging nodes after.  A hanging node's value is the interpolation
of its two edge-endpoint masters (weights 1/2), so the prolongation matrix P
maps conforming nodal vectors to values at all vertices.

Node neighborhoods are taken over conforming nodes with hanging corners
resolved through their masters; the resulting co-occurrence relation is
symmetric and matches the sparsity of the constrained system matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import AdaptiveMesh, CellMapping, canonical_vertex, hanging_vertex_keys

_WALK_TOL = 1e-9


@dataclass
class SymmetricStencil:
    """Mirror-point data for a node pair: where the line through x_j and x_i
    exits the macroelement around x_i on the far side."""

    x_sym: tuple
    r_len: float
    s_len: float
    reduced: bool
    nodes: np.ndarray
    weights: np.ndarray


class FESpace:
    def __init__(self, mesh: AdaptiveMesh, m: int = 1):
        self.mesh = mesh
        self.m = m
        self._build_vertices()
        self._build_cells()
        self._build_prolongation()
        self._build_neighborhoods()
        self._build_boundary()
        self._build_pair_stencils()

    # -- construction --------------------------------------------------------

    def _build_vertices(self):
        mesh = self.mesh
        hang = hanging_vertex_keys(mesh)
        corner_keys = set()
        for cell in mesh.cells:
            corner_keys.update(mesh.cell_corner_vertices(cell))
        conf_keys = sorted(corner_keys - set(hang),
                           key=lambda k: mesh.vertex_coords(k)[::-1])
        hang_keys = sorted(hang, key=lambda k: mesh.vertex_coords(k)[::-1])

        self.num_nodes = len(conf_keys)
        self.num_hanging = len(hang_keys)
        self.vkey2id = {k: i for i, k in enumerate(conf_keys)}
        for i, k in enumerate(hang_keys):
            self.vkey2id[k] = self.num_nodes + i

        coords = [mesh.vertex_coords(k) for k in conf_keys]
        hcoords = [mesh.vertex_coords(k) for k in hang_keys]
        self.nodes = np.array(coords, dtype=float).reshape(self.num_nodes, 2)
        self.hanging_coords = np.array(hcoords, dtype=float).reshape(self.num_hanging, 2)

        masters = np.zeros((self.num_hanging, 2), dtype=np.int64)
        for i, k in enumerate(hang_keys):
            mk = hang[k][0]
            masters[i] = (self.vkey2id[mk[0]], self.vkey2id[mk[1]])
            if masters[i].max() >= self.num_nodes:
                raise RuntimeError("hanging node constrained by a hanging node; "
                                   "mesh is not 2:1 corner balanced")
        self.hanging_masters = masters
        self.hanging_weights = np.full((self.num_hanging, 2), 0.5)

    def _build_cells(self):
        mesh = self.mesh
        ncell = len(mesh.cells)
        self.cell_nodes = np.zeros((ncell, 4), dtype=np.int64)
        self.cell_origin = np.zeros((ncell, 2))
        self.cell_sizes = np.zeros((ncell, 2))
        for ci, cell in enumerate(mesh.cells):
            r = mesh.cell_rect(cell)
            self.cell_origin[ci] = (r.x0, r.y0)
            self.cell_sizes[ci] = (r.width, r.height)
            for k, vk in enumerate(mesh.cell_corner_vertices(cell)):
                self.cell_nodes[ci, k] = self.vkey2id[vk]

        # per-corner resolution to conforming DOFs: (cell, corner, slot) -> id/weight
        self.resolve_idx = np.full((ncell, 4, 2), -1, dtype=np.int64)
        self.resolve_w = np.zeros((ncell, 4, 2))
        for ci in range(ncell):
            for k in range(4):
                v = self.cell_nodes[ci, k]
                if v < self.num_nodes:
                    self.resolve_idx[ci, k, 0] = v
                    self.resolve_w[ci, k, 0] = 1.0
                else:
                    h = v - self.num_nodes
                    self.resolve_idx[ci, k] = self.hanging_masters[h]
                    self.resolve_w[ci, k] = self.hanging_weights[h]

        # geometric cell lists per conforming node, and local mesh sizes
        cells_of = [[] for _ in range(self.num_nodes)]
        for ci in range(ncell):
            for v in self.cell_nodes[ci]:
                if v < self.num_nodes:
                    cells_of[v].append(ci)
        self.cells_of_node = cells_of
        csize = self.cell_sizes.max(axis=1)
        self.cell_h = csize
        self.h_node = np.array([csize[cl].min() if cl else 0.0 for cl in cells_of])

        self.cell_index = {cell: ci for ci, cell in enumerate(mesh.cells)}

    def _build_prolongation(self):
        nv = self.num_nodes + self.num_hanging
        rows = list(range(self.num_nodes))
        cols = list(range(self.num_nodes))
        vals = [1.0] * self.num_nodes
        for h in range(self.num_hanging):
            for s in range(2):
                rows.append(self.num_nodes + h)
                cols.append(self.hanging_masters[h, s])
                vals.append(self.hanging_weights[h, s])
        self.P = sp.csr_matrix((vals, (rows, cols)), shape=(nv, self.num_nodes))

    def _build_neighborhoods(self):
        ncell = self.cell_nodes.shape[0]
        cell_sets = []
        for ci in range(ncell):
            s = set(self.resolve_idx[ci][self.resolve_w[ci] > 0].tolist())
            cell_sets.append(sorted(s))
        self.cell_node_sets = cell_sets

        nbr = [set() for _ in range(self.num_nodes)]
        for s in cell_sets:
            for a in s:
                nbr[a].update(s)
        indptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        indices = []
        for i, s in enumerate(nbr):
            row = sorted(s)
            indices.extend(row)
            indptr[i + 1] = indptr[i] + len(row)
        self.nbr_indptr = indptr
        self.nbr_indices = np.array(indices, dtype=np.int64)

    def neighborhood(self, i: int) -> np.ndarray:
        return self.nbr_indices[self.nbr_indptr[i]:self.nbr_indptr[i + 1]]

    def _build_boundary(self):
        mesh = self.mesh
        dom = mesh.domain
        faces = []
        for ci, cell in enumerate(mesh.cells):
            r = mesh.cell_rect(cell)
            n = self.cell_nodes[ci]
            tol = 1e-12 * max(dom.width, dom.height)
            if abs(r.x0 - dom.x0) < tol:
                faces.append((ci, n[0], n[2], r.height, (-1.0, 0.0)))
            if abs(r.x1 - dom.x1) < tol:
                faces.append((ci, n[1], n[3], r.height, (1.0, 0.0)))
            if abs(r.y0 - dom.y0) < tol:
                faces.append((ci, n[0], n[1], r.width, (0.0, -1.0)))
            if abs(r.y1 - dom.y1) < tol:
                faces.append((ci, n[2], n[3], r.width, (0.0, 1.0)))
        self.boundary_faces = faces
        on_b = np.zeros(self.num_nodes, dtype=bool)
        for _, a, b, _, _ in faces:
            on_b[a] = True
            on_b[b] = True
        self.on_boundary = on_b

    # -- symmetric mirror-point stencils --------------------------------------

    def _ray_exit(self, i: int, d: np.ndarray):
        """First exit of the ray x_i + t*d from the union of cells having x_i
        as a corner.  Returns (t, cell index or -1)."""
        xi = self.nodes[i]
        best_t, best_c = 0.0, -1
        for ci in self.cells_of_node[i]:
            lo = self.cell_origin[ci] - xi
            hi = lo + self.cell_sizes[ci]
            t_exit = np.inf
            inside = True
            for ax in range(2):
                if abs(d[ax]) < 1e-15:
                    if lo[ax] > 1e-14 or hi[ax] < -1e-14:
                        inside = False
                        break
                else:
                    ta, tb = lo[ax] / d[ax], hi[ax] / d[ax]
                    if ta > tb:
                        ta, tb = tb, ta
                    if tb < -1e-14:
                        inside = False
                        break
                    t_exit = min(t_exit, tb)
            if inside and t_exit > best_t + _WALK_TOL * self.cell_h[ci]:
                best_t, best_c = t_exit, ci
        return best_t, best_c

    def _resolve_point_weights(self, ci: int, x: np.ndarray):
        """Bilinear weights at a point of cell ci, resolved to conforming nodes."""
        xi = (x - self.cell_origin[ci]) / self.cell_sizes[ci]
        xi = np.clip(xi, 0.0, 1.0)
        wx = (1.0 - xi[0], xi[0])
        wy = (1.0 - xi[1], xi[1])
        acc = {}
        for k in range(4):
            w = wx[k & 1] * wy[k >> 1]
            if w == 0.0:
                continue
            for s in range(2):
                idx = self.resolve_idx[ci, k, s]
                ws = self.resolve_w[ci, k, s]
                if idx >= 0 and ws > 0:
                    acc[idx] = acc.get(idx, 0.0) + w * ws
        items = sorted(acc.items())
        return (np.array([a for a, _ in items], dtype=np.int64),
                np.array([b for _, b in items]))

    def _mirror_vertex(self, i: int, j: int):
        """Vertex id of 2*x_i - x_j if it exists, computed on integer keys."""
        ki = self._conf_keys_cache[i]
        kj = self._conf_keys_cache[j]
        L = max(ki[0], kj[0])
        ixi, iyi = ki[1] << (L - ki[0]), ki[2] << (L - ki[0])
        ixj, iyj = kj[1] << (L - kj[0]), kj[2] << (L - kj[0])
        mx, my = 2 * ixi - ixj, 2 * iyi - iyj
        if mx < 0 or my < 0:
            return None
        return self.vkey2id.get(canonical_vertex(mx, my, L))

    def _build_pair_stencils(self):
        conf_keys = sorted(self.vkey2id, key=lambda k: self.vkey2id[k])
        self._conf_keys_cache = conf_keys[:self.num_nodes]

        pair_i, pair_j = [], []
        for i in range(self.num_nodes):
            for j in self.neighborhood(i):
                if j != i:
                    pair_i.append(i)
                    pair_j.append(j)
        E = len(pair_i)
        self.pair_i = np.array(pair_i, dtype=np.int64)
        self.pair_j = np.array(pair_j, dtype=np.int64)
        self.pair_rlen = np.linalg.norm(
            self.nodes[self.pair_j] - self.nodes[self.pair_i], axis=1)
        self.pair_slen = np.zeros(E)
        self.pair_reduced = np.zeros(E, dtype=bool)
        SMAX = 6
        self.pair_sym_idx = np.full((E, SMAX), -1, dtype=np.int64)
        self.pair_sym_w = np.zeros((E, SMAX))

        corner_cells = {}
        for i in range(self.num_nodes):
            sz = self.cell_sizes[self.cells_of_node[i]]
            uniform = bool(np.ptp(sz, axis=0).max() < 1e-12 * sz.max())
            corner_cells[i] = uniform

        cellset_corner_ids = [set(self.cell_nodes[cl].ravel().tolist())
                              for cl in (self.cells_of_node[i] for i in range(self.num_nodes))]

        for e in range(E):
            i, j = pair_i[e], pair_j[e]
            d = (self.nodes[i] - self.nodes[j])
            d /= np.linalg.norm(d)
            done = False
            if corner_cells[i]:
                mv = self._mirror_vertex(i, j)
                if mv is not None and mv in cellset_corner_ids[i]:
                    self.pair_slen[e] = self.pair_rlen[e]
                    if mv < self.num_nodes:
                        self.pair_sym_idx[e, 0] = mv
                        self.pair_sym_w[e, 0] = 1.0
                    else:
                        h = mv - self.num_nodes
                        self.pair_sym_idx[e, :2] = self.hanging_masters[h]
                        self.pair_sym_w[e, :2] = self.hanging_weights[h]
                    done = True
            if not done:
                t, ci = self._ray_exit(i, d)
                if ci < 0 or t <= _WALK_TOL * self.h_node[i]:
                    self.pair_reduced[e] = True
                    self.pair_slen[e] = 0.0
                else:
                    x_sym = self.nodes[i] + t * d
                    idx, w = self._resolve_point_weights(ci, x_sym)
                    self.pair_slen[e] = t
                    self.pair_sym_idx[e, :len(idx)] = idx
                    self.pair_sym_w[e, :len(w)] = w

        # CSR layout of pairs grouped by i (pair_i is already nondecreasing)
        self.pair_ptr = np.searchsorted(self.pair_i, np.arange(self.num_nodes + 1))

    # -- queries --------------------------------------------------------------

    def vertex_values(self, U: np.ndarray) -> np.ndarray:
        """Values at all vertices (conforming then hanging) for nodal data U."""
        return self.P @ U

    def evaluate(self, U: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Point evaluation of the FE function at arbitrary points."""
        pts = np.atleast_2d(points)
        vv = self.vertex_values(U)
        out = np.zeros((len(pts),) + U.shape[1:])
        for p, (x, y) in enumerate(pts):
            ci = self.cell_index[self.mesh.find_leaf(x, y)]
            xi = (np.array([x, y]) - self.cell_origin[ci]) / self.cell_sizes[ci]
            xi = np.clip(xi, 0.0, 1.0)
            wx = (1.0 - xi[0], xi[0])
            wy = (1.0 - xi[1], xi[1])
            val = 0.0
            for k in range(4):
                val = val + wx[k & 1] * wy[k >> 1] * vv[self.cell_nodes[ci, k]]
            out[p] = val
        return out if points.ndim > 1 else out[0]


def build_space(mesh: AdaptiveMesh, m: int = 1) -> FESpace:
    return FESpace(mesh, m)


def symmetric_stencil(space: FESpace, i: int, j: int) -> SymmetricStencil:
    """Mirror stencil for ordered pair (i, j), j in N(i)\\{i}."""
    sel = np.flatnonzero((space.pair_i == i) & (space.pair_j == j))
    if len(sel) == 0:
        raise ValueError(f"node {j} is not a neighbor of node {i}")
    e = sel[0]
    mask = space.pair_sym_idx[e] >= 0
    xi = space.nodes[i]
    d = xi - space.nodes[j]
    nrm = np.linalg.norm(d)
    x_sym = tuple(xi + space.pair_slen[e] * d / nrm)
    return SymmetricStencil(
        x_sym=x_sym,
        r_len=float(space.pair_rlen[e]),
        s_len=float(space.pair_slen[e]),
        reduced=bool(space.pair_reduced[e]),
        nodes=space.pair_sym_idx[e][mask].copy(),
        weights=space.pair_sym_w[e][mask].copy(),
    )


def transfer(u_old: np.ndarray, mapping: CellMapping,
             old_space: FESpace, new_space: FESpace) -> np.ndarray:
    """Move nodal data to a new space by point evaluation of the old FE function.

    Nodes present in both spaces keep their (possibly constrained) values
    exactly; new nodes are bilinear interpolations inside the old containing
    cell.
    """
    del mapping  # provenance is metadata; evaluation covers every case
    out = np.zeros((new_space.num_nodes,) + u_old.shape[1:])
    old_keys = old_space.vkey2id
    for idx in range(new_space.num_nodes):
        key = new_space._conf_keys_cache[idx]
        vid = old_keys.get(key)
        if vid is not None:
            if vid < old_space.num_nodes:
                out[idx] = u_old[vid]
            else:
                h = vid - old_space.num_nodes
                out[idx] = (old_space.hanging_weights[h, 0] * u_old[old_space.hanging_masters[h, 0]]
                            + old_space.hanging_weights[h, 1] * u_old[old_space.hanging_masters[h, 1]])
        else:
            out[idx] = old_space.evaluate(u_old, new_space.nodes[idx])
    return out
