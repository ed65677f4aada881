"""Hierarchical quadtree mesh over a rectangle with 2:1 balance enforcement.

Leaf cells are keyed by ``(level, ix, iy)`` where ``ix, iy`` are integer cell
coordinates on the level's grid (root grid times 2**level).  Vertices are keyed
by canonical integer coordinates so that the same physical point always maps to
the same key (and the same floating-point coordinates) across meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

REFINE = "refine"
KEEP = "keep"
COARSEN = "coarsen"

# local corner order of a cell: SW, SE, NW, NE
CORNER_OFFSETS = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class Rectangle:
    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height


def canonical_vertex(ix: int, iy: int, level: int):
    """Reduce a vertex key (grid indices at a level) to its coarsest representation."""
    while level > 0 and ix % 2 == 0 and iy % 2 == 0:
        ix //= 2
        iy //= 2
        level -= 1
    return (level, ix, iy)


class AdaptiveMesh:
    """Immutable set of quadtree leaves tiling a rectangle, 2:1 balanced.

    The balance condition is corner-inclusive: leaves sharing an edge or a
    corner differ by at most one refinement level, which guarantees a single
    hanging node per coarse/fine edge.
    """

    def __init__(self, domain: Rectangle, nx: int, ny: int, cells):
        self.domain = domain
        self.nx = nx
        self.ny = ny
        self.cells = tuple(sorted(cells))
        self._cellset = frozenset(self.cells)
        self.max_level = max(c[0] for c in self.cells)

    def __len__(self):
        return len(self.cells)

    def __contains__(self, key):
        return key in self._cellset

    # -- geometry -----------------------------------------------------------

    def cell_size(self, level: int):
        return (self.domain.width / self.nx / (1 << level),
                self.domain.height / self.ny / (1 << level))

    def vertex_coords(self, vkey):
        level, ix, iy = vkey
        hx = self.domain.width / self.nx / (1 << level)
        hy = self.domain.height / self.ny / (1 << level)
        return (self.domain.x0 + ix * hx, self.domain.y0 + iy * hy)

    def cell_rect(self, key) -> Rectangle:
        level, ix, iy = key
        hx, hy = self.cell_size(level)
        x0 = self.domain.x0 + ix * hx
        y0 = self.domain.y0 + iy * hy
        return Rectangle(x0, y0, x0 + hx, y0 + hy)

    def cell_corner_vertices(self, key):
        level, ix, iy = key
        return tuple(canonical_vertex(ix + dx, iy + dy, level)
                     for dx, dy in CORNER_OFFSETS)

    def grid_dims(self, level: int):
        return self.nx * (1 << level), self.ny * (1 << level)

    # -- topology queries ----------------------------------------------------

    def covering_leaf(self, level: int, ix: int, iy: int):
        """Leaf equal to or containing cell (level, ix, iy), or None if finer/outside."""
        gx, gy = self.grid_dims(level)
        if not (0 <= ix < gx and 0 <= iy < gy):
            return None
        l, x, y = level, ix, iy
        while True:
            key = (l, x, y)
            if key in self._cellset:
                return key
            if l == 0:
                return None
            l, x, y = l - 1, x // 2, y // 2

    def find_leaf(self, x: float, y: float):
        """Leaf whose closure contains the point (deterministic for boundary points)."""
        dom = self.domain
        tx = min(max(x, dom.x0), dom.x1)
        ty = min(max(y, dom.y0), dom.y1)
        for level in range(self.max_level, -1, -1):
            hx, hy = self.cell_size(level)
            gx, gy = self.grid_dims(level)
            ix = min(int((tx - dom.x0) / hx), gx - 1)
            iy = min(int((ty - dom.y0) / hy), gy - 1)
            # float roundoff can put a boundary point one cell off
            for cx in (ix, ix - 1, ix + 1):
                for cy in (iy, iy - 1, iy + 1):
                    if 0 <= cx < gx and 0 <= cy < gy and (level, cx, cy) in self._cellset:
                        r = self.cell_rect((level, cx, cy))
                        eps = 1e-12 * max(r.width, r.height)
                        if (r.x0 - eps <= tx <= r.x1 + eps
                                and r.y0 - eps <= ty <= r.y1 + eps):
                            return (level, cx, cy)
        raise RuntimeError(f"point ({x}, {y}) not covered by any leaf")

    def edge_neighbor_children(self, key, side: str):
        """The two finer leaves across an edge, or None if the interface is conforming.

        side is one of 'W', 'E', 'S', 'N'.
        """
        level, ix, iy = key
        if side == "E":
            base = (2 * (ix + 1), 2 * iy)
            keys = [(level + 1, base[0], base[1]), (level + 1, base[0], base[1] + 1)]
        elif side == "W":
            base = (2 * ix - 1, 2 * iy)
            keys = [(level + 1, base[0], base[1]), (level + 1, base[0], base[1] + 1)]
        elif side == "N":
            base = (2 * ix, 2 * (iy + 1))
            keys = [(level + 1, base[0], base[1]), (level + 1, base[0] + 1, base[1])]
        elif side == "S":
            base = (2 * ix, 2 * iy - 1)
            keys = [(level + 1, base[0], base[1]), (level + 1, base[0] + 1, base[1])]
        else:
            raise ValueError(side)
        gx, gy = self.grid_dims(level + 1)
        for k in keys:
            if not (0 <= k[1] < gx and 0 <= k[2] < gy):
                return None
        if all(k in self._cellset for k in keys):
            return tuple(keys)
        return None


@dataclass
class CellMapping:
    """Provenance of each new leaf after an adapt step.

    entries maps a new leaf key to one of
      ("same", old_key), ("child", old_parent_key), ("merged", (4 old child keys)).
    downgraded lists cells whose mark could not be honored.
    """

    entries: dict = field(default_factory=dict)
    downgraded: list = field(default_factory=list)

    def is_identity(self):
        return all(kind == "same" for kind, _ in self.entries.values())


def new_uniform(nx: int, ny: int, domain: Rectangle) -> AdaptiveMesh:
    if nx < 1 or ny < 1:
        raise ValueError(f"root grid must be at least 1x1, got {nx}x{ny}")
    if domain.width <= 0 or domain.height <= 0:
        raise ValueError("degenerate domain")
    cells = [(0, ix, iy) for iy in range(ny) for ix in range(nx)]
    return AdaptiveMesh(domain, nx, ny, cells)


def _children(key):
    level, ix, iy = key
    return [(level + 1, 2 * ix + dx, 2 * iy + dy) for dx, dy in CORNER_OFFSETS]


def _neighbor_ring(key, nx, ny):
    """Same-level edge/corner neighbor positions of a cell, clipped to the grid."""
    level, ix, iy = key
    gx, gy = nx * (1 << level), ny * (1 << level)
    out = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            jx, jy = ix + dx, iy + dy
            if 0 <= jx < gx and 0 <= jy < gy:
                out.append((level, jx, jy))
    return out


def _ancestor_leaf(cellset, key):
    l, x, y = key
    while True:
        if (l, x, y) in cellset:
            return (l, x, y)
        if l == 0:
            return None
        l, x, y = l - 1, x // 2, y // 2


def adapt(mesh: AdaptiveMesh, marks: dict) -> tuple[AdaptiveMesh, CellMapping]:
    """Apply refine/keep/coarsen marks, restoring 2:1 balance.

    Coarsening happens only when all four siblings are marked and the merge
    keeps the mesh balanced; impossible marks are downgraded to keep.
    """
    for c in mesh.cells:
        if c not in marks:
            raise ValueError(f"mark missing for cell {c}")

    leaves = set(mesh.cells)
    refine = {c for c in mesh.cells if marks[c] == REFINE}

    # Balance closure: refining a cell forces coarser edge/corner neighbors to refine.
    work = list(refine)
    while work:
        cell = work.pop()
        level = cell[0]
        for pos in _neighbor_ring(cell, mesh.nx, mesh.ny):
            nb = _ancestor_leaf(leaves, pos)
            if nb is not None and nb[0] < level and nb not in refine:
                refine.add(nb)
                work.append(nb)

    mapping = CellMapping()
    for c in mesh.cells:
        if marks[c] == COARSEN and c in refine:
            mapping.downgraded.append(c)

    for c in refine:
        leaves.remove(c)
        ch = _children(c)
        leaves.update(ch)
        for k in ch:
            mapping.entries[k] = ("child", c)

    # Coarsening: unanimous sibling groups, finest level first, re-checked
    # against the evolving leaf set so the result stays balanced.
    coarsen = {c for c in mesh.cells if marks[c] == COARSEN and c not in refine}
    groups = {}
    for c in coarsen:
        level, ix, iy = c
        if level == 0:
            mapping.downgraded.append(c)
            continue
        groups.setdefault((level - 1, ix // 2, iy // 2), []).append(c)

    merged_children = set()
    for parent in sorted(groups, key=lambda p: (-p[0], p[1], p[2])):
        siblings = _children(parent)
        if len(groups[parent]) != 4 or any(s not in leaves for s in siblings):
            mapping.downgraded.extend(sorted(groups[parent]))
            continue
        # merge allowed unless a leaf two levels finer touches the parent
        pl, px, py = parent
        fine_level = pl + 2
        fx0, fy0 = 4 * px, 4 * py
        gx, gy = mesh.nx * (1 << fine_level), mesh.ny * (1 << fine_level)
        blocked = False
        for jx in range(fx0 - 1, fx0 + 5):
            for jy in range(fy0 - 1, fy0 + 5):
                if fx0 <= jx < fx0 + 4 and fy0 <= jy < fy0 + 4:
                    continue  # interior of the parent region
                if 0 <= jx < gx and 0 <= jy < gy and (fine_level, jx, jy) in leaves:
                    blocked = True
                    break
            if blocked:
                break
        if blocked:
            mapping.downgraded.extend(sorted(groups[parent]))
            continue
        for s in siblings:
            leaves.remove(s)
        leaves.add(parent)
        merged_children.update(siblings)
        mapping.entries[parent] = ("merged", tuple(sorted(siblings)))

    for c in mesh.cells:
        if c in leaves:
            mapping.entries[c] = ("same", c)

    return AdaptiveMesh(mesh.domain, mesh.nx, mesh.ny, leaves), mapping


def hanging_interfaces(mesh: AdaptiveMesh):
    """(coarse cell, edge-midpoint coordinates) for every coarse/fine edge pair."""
    out = []
    for cell in mesh.cells:
        rect = mesh.cell_rect(cell)
        for side in ("W", "E", "S", "N"):
            if mesh.edge_neighbor_children(cell, side) is None:
                continue
            if side == "E":
                mid = (rect.x1, 0.5 * (rect.y0 + rect.y1))
            elif side == "W":
                mid = (rect.x0, 0.5 * (rect.y0 + rect.y1))
            elif side == "N":
                mid = (0.5 * (rect.x0 + rect.x1), rect.y1)
            else:
                mid = (0.5 * (rect.x0 + rect.x1), rect.y0)
            out.append((cell, mid))
    return out


def hanging_vertex_keys(mesh: AdaptiveMesh):
    """Map hanging vertex key -> (master vertex keys, coarse cell, side)."""
    out = {}
    for cell in mesh.cells:
        level, ix, iy = cell
        for side in ("W", "E", "S", "N"):
            if mesh.edge_neighbor_children(cell, side) is None:
                continue
            if side in ("W", "E"):
                vx = ix if side == "W" else ix + 1
                hang = canonical_vertex(2 * vx, 2 * iy + 1, level + 1)
                masters = (canonical_vertex(vx, iy, level),
                           canonical_vertex(vx, iy + 1, level))
            else:
                vy = iy if side == "S" else iy + 1
                hang = canonical_vertex(2 * ix + 1, 2 * vy, level + 1)
                masters = (canonical_vertex(ix, vy, level),
                           canonical_vertex(ix + 1, vy, level))
            out[hang] = (masters, cell, side)
    return out
