import numpy as np
import pytest

from shockfem.mesh import (
    COARSEN,
    KEEP,
    REFINE,
    AdaptiveMesh,
    Rectangle,
    adapt,
    hanging_interfaces,
    new_uniform,
)

UNIT = Rectangle(0.0, 0.0, 1.0, 1.0)


def rects_touch(a, b, tol=1e-12):
    """True if two closed rectangles share at least a corner point."""
    return (a.x0 <= b.x1 + tol and b.x0 <= a.x1 + tol
            and a.y0 <= b.y1 + tol and b.y0 <= a.y1 + tol)


def assert_balanced(mesh):
    """Brute-force oracle: adjacent leaves (edge or corner) differ by <= 1 level."""
    cells = mesh.cells
    rects = [mesh.cell_rect(c) for c in cells]
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            if rects_touch(rects[i], rects[j]):
                assert abs(cells[i][0] - cells[j][0]) <= 1, (cells[i], cells[j])


def assert_tiles_domain(mesh):
    areas = sum(mesh.cell_rect(c).area for c in mesh.cells)
    assert areas == pytest.approx(mesh.domain.area, rel=1e-12)
    # no overlap: pairwise interiors disjoint
    rects = [mesh.cell_rect(c) for c in mesh.cells]
    for i in range(len(rects)):
        for j in range(i + 1, len(rects)):
            a, b = rects[i], rects[j]
            ox = min(a.x1, b.x1) - max(a.x0, b.x0)
            oy = min(a.y1, b.y1) - max(a.y0, b.y0)
            assert not (ox > 1e-12 and oy > 1e-12), (mesh.cells[i], mesh.cells[j])


def all_marks(mesh, mark):
    return {c: mark for c in mesh.cells}


def test_new_uniform_counts():
    assert len(new_uniform(16, 16, UNIT)) == 256
    assert len(new_uniform(1, 1, UNIT)) == 1
    m = new_uniform(16, 64, Rectangle(0.0, 0.0, 4.1, 1.0))
    assert len(m) == 1024
    assert all(c[0] == 0 for c in new_uniform(16, 16, UNIT).cells)


def test_new_uniform_rejects_degenerate():
    with pytest.raises(ValueError):
        new_uniform(0, 4, UNIT)
    with pytest.raises(ValueError):
        new_uniform(4, 4, Rectangle(0.0, 0.0, 0.0, 1.0))


def test_adapt_all_keep_is_identity():
    mesh = new_uniform(4, 4, UNIT)
    new, mapping = adapt(mesh, all_marks(mesh, KEEP))
    assert new.cells == mesh.cells
    assert mapping.is_identity()


def test_refine_one_cell_in_2x2():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    new, mapping = adapt(mesh, marks)
    assert len(new) == 7
    assert_balanced(new)
    assert_tiles_domain(new)
    children = [k for k, v in mapping.entries.items() if v[0] == "child"]
    assert len(children) == 4


def test_second_refinement_propagates_balance():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    # refine one grandchild; level-0 neighbors must split to keep 2:1
    marks = all_marks(mesh, KEEP)
    marks[(1, 1, 1)] = REFINE
    new, _ = adapt(mesh, marks)
    assert_balanced(new)
    assert_tiles_domain(new)
    assert new.max_level == 2
    # the adjacent level-0 cells cannot have survived
    assert (0, 1, 0) not in new
    assert (0, 0, 1) not in new
    assert (0, 1, 1) not in new


def test_coarsen_requires_unanimity_and_balance():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)

    # only 3 of 4 siblings marked: nothing merges
    marks = all_marks(mesh, KEEP)
    for c in [(1, 0, 0), (1, 1, 0), (1, 0, 1)]:
        marks[c] = COARSEN
    new, mapping = adapt(mesh, marks)
    assert new.cells == mesh.cells
    assert len(mapping.downgraded) == 3

    # all 4 marked: merge back to uniform 2x2
    marks = all_marks(mesh, KEEP)
    for c in [(1, 0, 0), (1, 1, 0), (1, 0, 1), (1, 1, 1)]:
        marks[c] = COARSEN
    new, mapping = adapt(mesh, marks)
    assert len(new) == 4
    assert mapping.entries[(0, 0, 0)][0] == "merged"


def test_coarsen_blocked_by_balance():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    marks = all_marks(mesh, KEEP)
    marks[(1, 1, 1)] = REFINE
    mesh, _ = adapt(mesh, marks)  # has level-2 leaves next to level-1 leaves

    # merging the level-1 quad under (0,0,0)... pick the group adjacent to level-2 cells
    marks = all_marks(mesh, KEEP)
    for c in mesh.cells:
        if c[0] == 1 and (c[1], c[2]) in [(0, 0), (1, 0), (0, 1), (1, 1)]:
            marks[c] = COARSEN
    new, _ = adapt(mesh, marks)
    assert_balanced(new)
    assert_tiles_domain(new)


def test_refine_beats_coarsen_after_propagation():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    marks = all_marks(mesh, KEEP)
    marks[(1, 1, 1)] = REFINE       # forces level-0 neighbors to refine
    marks[(0, 1, 1)] = COARSEN      # contradicts the forced refinement
    new, mapping = adapt(mesh, marks)
    assert_balanced(new)
    assert (0, 1, 1) in mapping.downgraded


def test_random_adapt_sequences_stay_balanced():
    rng = np.random.default_rng(7)
    mesh = new_uniform(3, 2, Rectangle(-1.0, 0.0, 2.0, 2.0))
    for _ in range(6):
        marks = {}
        for c in mesh.cells:
            marks[c] = rng.choice([REFINE, KEEP, COARSEN], p=[0.3, 0.5, 0.2])
        mesh, mapping = adapt(mesh, marks)
        assert_balanced(mesh)
        assert_tiles_domain(mesh)
        # mapping covers every new leaf
        assert set(mapping.entries) == set(mesh.cells)


def test_hanging_interfaces_uniform_empty():
    assert hanging_interfaces(new_uniform(4, 4, UNIT)) == []


def test_hanging_interfaces_seven_leaf():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    found = hanging_interfaces(mesh)
    # geometric oracle: enumerate fine-cell corners lying strictly inside a
    # coarse cell's edge
    expected = set()
    fine = [c for c in mesh.cells if c[0] == 1]
    coarse = [c for c in mesh.cells if c[0] == 0]
    for f in fine:
        r = mesh.cell_rect(f)
        for (px, py) in [(r.x0, r.y0), (r.x1, r.y0), (r.x0, r.y1), (r.x1, r.y1)]:
            for c in coarse:
                cr = mesh.cell_rect(c)
                on_vert = (abs(px - cr.x0) < 1e-14 or abs(px - cr.x1) < 1e-14) \
                    and cr.y0 + 1e-14 < py < cr.y1 - 1e-14
                on_horz = (abs(py - cr.y0) < 1e-14 or abs(py - cr.y1) < 1e-14) \
                    and cr.x0 + 1e-14 < px < cr.x1 - 1e-14
                if on_vert or on_horz:
                    expected.add((round(px, 12), round(py, 12)))
    got = {(round(x, 12), round(y, 12)) for _, (x, y) in found}
    assert got == expected
    assert len(found) == 2


def test_hanging_interfaces_gone_after_full_refine():
    mesh = new_uniform(2, 2, UNIT)
    mesh, _ = adapt(mesh, all_marks(mesh, REFINE))
    assert hanging_interfaces(mesh) == []
    assert len(mesh) == 16

    # refining every leaf of a graded mesh keeps the same hanging structure
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    refined, _ = adapt(mesh, all_marks(mesh, REFINE))
    assert len(hanging_interfaces(refined)) == 2 * len(hanging_interfaces(mesh))


def test_leaf_areas_sum_after_adapting():
    mesh = new_uniform(4, 4, Rectangle(0.0, 0.0, 4.1, 1.0))
    rng = np.random.default_rng(3)
    for _ in range(4):
        marks = {c: (REFINE if rng.random() < 0.3 else KEEP) for c in mesh.cells}
        mesh, _ = adapt(mesh, marks)
    total = sum(mesh.cell_rect(c).area for c in mesh.cells)
    assert total == pytest.approx(4.1, rel=1e-12)


def test_find_leaf_covers_domain():
    mesh = new_uniform(2, 2, UNIT)
    marks = all_marks(mesh, KEEP)
    marks[(0, 0, 0)] = REFINE
    mesh, _ = adapt(mesh, marks)
    rng = np.random.default_rng(11)
    for _ in range(200):
        x, y = rng.random(2)
        leaf = mesh.find_leaf(x, y)
        r = mesh.cell_rect(leaf)
        assert r.x0 - 1e-12 <= x <= r.x1 + 1e-12
        assert r.y0 - 1e-12 <= y <= r.y1 + 1e-12
    for pt in [(0.0, 0.0), (1.0, 1.0), (0.5, 0.5), (0.25, 0.25)]:
        mesh.find_leaf(*pt)
