import numpy as np
import pytest

from shockfem.fespace import build_space, symmetric_stencil, transfer
from shockfem.mesh import KEEP, REFINE, Rectangle, adapt, new_uniform

UNIT = Rectangle(0.0, 0.0, 1.0, 1.0)


def seven_leaf_mesh():
    mesh = new_uniform(2, 2, UNIT)
    marks = {c: KEEP for c in mesh.cells}
    marks[(0, 0, 0)] = REFINE
    mesh, mapping = adapt(mesh, marks)
    return mesh, mapping


def node_at(space, x, y):
    d = np.linalg.norm(space.nodes - np.array([x, y]), axis=1)
    i = int(np.argmin(d))
    assert d[i] < 1e-12
    return i


def test_uniform_2x2_node_counts():
    space = build_space(new_uniform(2, 2, UNIT))
    assert space.num_nodes == 9
    assert space.num_hanging == 0


def test_seven_leaf_constraints_are_edge_midpoints():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)
    assert space.num_hanging == 2
    for h in range(space.num_hanging):
        xm = space.nodes[space.hanging_masters[h]]
        w = space.hanging_weights[h]
        assert w == pytest.approx([0.5, 0.5])
        mid = w[0] * xm[0] + w[1] * xm[1]
        assert mid == pytest.approx(space.hanging_coords[h], abs=1e-14)
        assert np.sum(w) == pytest.approx(1.0, abs=1e-14)


def test_constraints_are_edge_midpoints_all_orientations():
    # center cell of a 3x3 grid refined: hanging nodes on all four sides,
    # reported by coarse cells from the W, E, S, and N directions
    mesh = new_uniform(3, 3, UNIT)
    marks = {c: KEEP for c in mesh.cells}
    marks[(0, 1, 1)] = REFINE
    mesh, _ = adapt(mesh, marks)
    space = build_space(mesh)
    assert space.num_hanging == 4
    for h in range(space.num_hanging):
        xm = space.nodes[space.hanging_masters[h]]
        mid = 0.5 * (xm[0] + xm[1])
        assert mid == pytest.approx(space.hanging_coords[h], abs=1e-14)
        # masters are the hanging node's own edge endpoints, one cell apart
        assert np.linalg.norm(xm[0] - xm[1]) == pytest.approx(1.0 / 3.0)


def test_constraints_midpoints_on_random_meshes():
    rng = np.random.default_rng(20)
    mesh = new_uniform(3, 2, UNIT)
    for _ in range(5):
        marks = {c: (REFINE if rng.random() < 0.35 else KEEP) for c in mesh.cells}
        mesh, _ = adapt(mesh, marks)
        space = build_space(mesh)
        for h in range(space.num_hanging):
            xm = space.nodes[space.hanging_masters[h]]
            mid = 0.5 * (xm[0] + xm[1])
            assert mid == pytest.approx(space.hanging_coords[h], abs=1e-13)


def test_center_node_neighborhood_uniform():
    space = build_space(new_uniform(2, 2, UNIT))
    i = node_at(space, 0.5, 0.5)
    assert set(space.neighborhood(i)) == set(range(9))
    assert i in space.neighborhood(i)


def test_neighborhood_symmetry_on_adapted_mesh():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)
    for i in range(space.num_nodes):
        for j in space.neighborhood(i):
            assert i in space.neighborhood(j)


def test_hanging_interpolation_reproduces_linears():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)
    u = 1.0 + 2.0 * space.nodes[:, 0] - 0.7 * space.nodes[:, 1]
    vv = space.vertex_values(u)
    hang = vv[space.num_nodes:]
    exact = 1.0 + 2.0 * space.hanging_coords[:, 0] - 0.7 * space.hanging_coords[:, 1]
    assert hang == pytest.approx(exact, abs=1e-12)


def test_symmetric_stencil_axis_neighbor_uniform():
    space = build_space(new_uniform(4, 4, UNIT))
    i = node_at(space, 0.5, 0.5)
    j = node_at(space, 0.75, 0.5)
    st = symmetric_stencil(space, i, j)
    assert not st.reduced
    assert st.s_len == pytest.approx(0.25)
    assert st.x_sym == pytest.approx((0.25, 0.5))
    assert len(st.nodes) == 1
    assert st.nodes[0] == node_at(space, 0.25, 0.5)
    assert st.weights[0] == pytest.approx(1.0)


def test_symmetric_stencil_diagonal_neighbor_uniform():
    space = build_space(new_uniform(4, 4, UNIT))
    i = node_at(space, 0.5, 0.5)
    j = node_at(space, 0.75, 0.75)
    st = symmetric_stencil(space, i, j)
    assert st.x_sym == pytest.approx((0.25, 0.25))
    assert st.nodes[0] == node_at(space, 0.25, 0.25)
    assert st.weights[0] == pytest.approx(1.0)


def test_symmetric_stencil_boundary_reduced():
    space = build_space(new_uniform(4, 4, UNIT))
    i = node_at(space, 1.0, 0.5)       # right-edge node
    j = node_at(space, 0.75, 0.5)      # inward neighbor
    st = symmetric_stencil(space, i, j)
    assert st.reduced
    assert st.s_len == 0.0


def test_symmetric_stencil_weights_reproduce_bilinears():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)

    def f(x, y):
        return 0.3 + 1.1 * x - 0.4 * y + 0.9 * x * y

    u = f(space.nodes[:, 0], space.nodes[:, 1])
    checked = 0
    for e in range(len(space.pair_i)):
        if space.pair_reduced[e]:
            continue
        mask = space.pair_sym_idx[e] >= 0
        idx = space.pair_sym_idx[e][mask]
        w = space.pair_sym_w[e][mask]
        i = space.pair_i[e]
        d = space.nodes[i] - space.nodes[space.pair_j[e]]
        x_sym = space.nodes[i] + space.pair_slen[e] * d / np.linalg.norm(d)
        # bilinear reproduction holds whenever the mirror point's cell is
        # crossed by the x_sym segment; f is globally bilinear here only on
        # cells, so compare against the FE interpolant instead
        val = np.dot(w, u[idx])
        exact = space.evaluate(u, x_sym)
        assert val == pytest.approx(exact, abs=1e-12)
        assert np.sum(w) == pytest.approx(1.0, abs=1e-12)
        checked += 1
    assert checked > 20


def test_symmetric_point_on_macroelement_boundary():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)
    for e in range(len(space.pair_i)):
        if space.pair_reduced[e]:
            continue
        i = space.pair_i[e]
        d = space.nodes[i] - space.nodes[space.pair_j[e]]
        d /= np.linalg.norm(d)
        x_sym = space.nodes[i] + space.pair_slen[e] * d
        # x_sym lies in the closure of the macroelement and cannot be extended
        h = space.h_node[i]
        inside = space._ray_exit(i, d)[0]
        assert inside == pytest.approx(space.pair_slen[e], abs=1e-9 * h)


def test_transfer_identity():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)
    rng = np.random.default_rng(0)
    u = rng.random(space.num_nodes)
    marks = {c: KEEP for c in mesh.cells}
    new_mesh, mapping = adapt(mesh, marks)
    new_space = build_space(new_mesh)
    v = transfer(u, mapping, space, new_space)
    # node orderings coincide for identical meshes
    assert v == pytest.approx(u, abs=0)


def test_transfer_refine_reproduces_linears():
    mesh = new_uniform(2, 2, UNIT)
    space = build_space(mesh)
    u = 2.0 * space.nodes[:, 0] + 0.25
    marks = {c: KEEP for c in mesh.cells}
    marks[(0, 1, 1)] = REFINE
    new_mesh, mapping = adapt(mesh, marks)
    new_space = build_space(new_mesh)
    v = transfer(u, mapping, space, new_space)
    assert v == pytest.approx(2.0 * new_space.nodes[:, 0] + 0.25, abs=1e-12)


def test_transfer_coarsen_keeps_corner_values():
    mesh, _ = seven_leaf_mesh()
    space = build_space(mesh)

    def f(x, y):
        return 1.0 + x - y + 3.0 * x * y

    u = f(space.nodes[:, 0], space.nodes[:, 1])
    marks = {c: KEEP for c in mesh.cells}
    for c in mesh.cells:
        if c[0] == 1:
            marks[c] = "coarsen"
    new_mesh, mapping = adapt(mesh, marks)
    assert len(new_mesh) == 4
    new_space = build_space(new_mesh)
    v = transfer(u, mapping, space, new_space)
    for idx in range(new_space.num_nodes):
        x, y = new_space.nodes[idx]
        assert v[idx] == pytest.approx(f(x, y), abs=1e-12)


def test_transfer_vector_valued():
    mesh = new_uniform(2, 2, UNIT)
    space = build_space(mesh, m=4)
    rng = np.random.default_rng(5)
    u = rng.random((space.num_nodes, 4))
    marks = {c: KEEP for c in mesh.cells}
    marks[(0, 0, 0)] = REFINE
    new_mesh, mapping = adapt(mesh, marks)
    new_space = build_space(new_mesh, m=4)
    v = transfer(u, mapping, space, new_space)
    assert v.shape == (new_space.num_nodes, 4)
    # old nodes keep values
    for idx in range(space.num_nodes):
        x, y = space.nodes[idx]
        jdx = node_at(new_space, x, y)
        assert v[jdx] == pytest.approx(u[idx], abs=0)
