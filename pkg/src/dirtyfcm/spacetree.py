"""Geometry-approximation space tree: adaptive octree + flood fill.

The tree refines only cells overlapped by boundary triangles, so the cut
shell is resolved to depth ``n_max`` while empty regions stay coarse.  A
breadth-first flood fill then labels every non-cut leaf inside or outside,
starting from the domain corner (guaranteed outside by the embedding
padding).  The filled tree is the fast first-stage point classifier: a
point in a labeled leaf needs no ray casting at all.

Watertightness of the cut shell is never assumed; it is observable.  If the
shell has a leaf-sized hole the outside flood leaks through and the interior
count drops to zero, which is exactly the signal ``auto_depth`` uses to back
off to a coarser, sealable resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .mesh_io import Aabb, TriangleSoup
from .intersect import tris_boxes_overlap


class LeafState(IntEnum):
    CUT = 0
    UNCLASSIFIED = 1
    INSIDE = 2
    OUTSIDE = 3


_INTERNAL = -1

_FACE_DIRS = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_ALL_DIRS = [(dx, dy, dz)
             for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)
             if (dx, dy, dz) != (0, 0, 0)]


class SpaceTree:
    """Adaptive octree over a box; leaves are Cut or Unclassified."""

    def __init__(self, domain: Aabb, n_max: int, nodes: dict):
        self.domain = domain
        self.n_max = n_max
        self.nodes = nodes  # (d,i,j,k) -> _INTERNAL or LeafState

    # -- geometry of keys ---------------------------------------------------

    def leaf_box(self, key) -> Aabb:
        d, i, j, k = key
        ext = self.domain.extents / (1 << d)
        lo = self.domain.min + np.array([i, j, k], dtype=float) * ext
        return Aabb(lo, lo + ext)

    def leaf_center(self, key) -> np.ndarray:
        d, i, j, k = key
        ext = self.domain.extents / (1 << d)
        return self.domain.min + (np.array([i, j, k], dtype=float) + 0.5) * ext

    def leaf_extents(self, depth: int) -> np.ndarray:
        return self.domain.extents / (1 << depth)

    def min_leaf_edge(self) -> float:
        return float(self.leaf_extents(self.n_max).min())

    # -- iteration ----------------------------------------------------------

    def leaves(self):
        for key, state in self.nodes.items():
            if state != _INTERNAL:
                yield key, LeafState(state)

    def state_counts(self) -> dict:
        counts = {s: 0 for s in LeafState}
        for _, s in self.leaves():
            counts[s] += 1
        return counts

    def state_volumes(self) -> dict:
        vols = {s: 0.0 for s in LeafState}
        base = float(np.prod(self.domain.extents))
        for (d, _, _, _), s in self.leaves():
            vols[s] += base / (1 << (3 * d))
        return vols

    # -- point location -----------------------------------------------------

    def _cell_index(self, t: float, d: int) -> int:
        """Cell index along one axis for normalized coordinate t in [0,1].

        Points exactly on an internal cell face belong to the lower-index
        cell; the domain boundary clamps inward.
        """
        n = 1 << d
        u = t * n
        i = int(np.floor(u))
        if i > 0 and u == i:
            i -= 1
        return min(max(i, 0), n - 1)

    def leaf_at(self, point):
        p = np.asarray(point, dtype=float)
        t = (p - self.domain.min) / self.domain.extents
        if (t < 0).any() or (t > 1).any():
            raise ValueError(f"point {p} outside tree domain")
        for d in range(self.n_max + 1):
            key = (d, self._cell_index(t[0], d), self._cell_index(t[1], d),
                   self._cell_index(t[2], d))
            state = self.nodes.get(key)
            if state is None:
                raise KeyError(f"no node at {key}")  # tiling violated
            if state != _INTERNAL:
                return key
        raise KeyError("descended past n_max without hitting a leaf")

    # -- adjacency ----------------------------------------------------------

    def _span(self, key):
        d, i, j, k = key
        s = 1 << (self.n_max - d)
        return (np.array([i, j, k], dtype=np.int64) * s,
                (np.array([i, j, k], dtype=np.int64) + 1) * s)

    def neighbor_leaves(self, key, connectivity: int = 6):
        """Leaf keys adjacent to ``key`` through faces (6) or through any
        shared face, edge, or corner (26).  Depth transitions are exact."""
        d, i, j, k = key
        dirs = _FACE_DIRS if connectivity == 6 else _ALL_DIRS
        lo, hi = self._span(key)
        fine = 1 << self.n_max
        found = set()
        for dv in dirs:
            ni, nj, nk = i + dv[0], j + dv[1], k + dv[2]
            n = 1 << d
            if not (0 <= ni < n and 0 <= nj < n and 0 <= nk < n):
                continue
            node = (d, ni, nj, nk)
            while node not in self.nodes:
                nd, ai, aj, ak = node
                node = (nd - 1, ai >> 1, aj >> 1, ak >> 1)
            if self.nodes[node] != _INTERNAL:
                found.add(node)
                continue
            stack = [node]
            while stack:
                cur = stack.pop()
                if self.nodes[cur] != _INTERNAL:
                    found.add(cur)
                    continue
                cd, ci, cj, ck = cur
                for oz in range(2):
                    for oy in range(2):
                        for ox in range(2):
                            ch = (cd + 1, 2 * ci + ox, 2 * cj + oy, 2 * ck + oz)
                            if ch not in self.nodes:
                                continue
                            clo, chi = self._span(ch)
                            if self._touching(lo, hi, clo, chi, dv, connectivity):
                                stack.append(ch)
        found.discard(key)
        return sorted(found)

    @staticmethod
    def _touching(lo, hi, clo, chi, dv, connectivity):
        # Closed-interval contact per axis; face adjacency requires positive
        # overlap on the two in-plane axes.
        for a in range(3):
            if clo[a] > hi[a] or chi[a] < lo[a]:
                return False
        if connectivity == 6:
            for a in range(3):
                if dv[a] == 0 and min(hi[a], chi[a]) - max(lo[a], clo[a]) <= 0:
                    return False
        return True


_CHILD_OFFSETS = np.array([[ox, oy, oz]
                           for oz in range(2) for oy in range(2) for ox in range(2)],
                          dtype=np.int64)


def build_geo_tree(soup: TriangleSoup, domain: Aabb, n_max: int) -> SpaceTree:
    """Subdivide cells overlapped by triangles down to depth ``n_max``.

    The build is level-synchronous: every (cell, candidate triangle) pair of
    a level goes through one batched separating-axis test.  Overlap ties
    classify as cut (safe side).  The soup must lie strictly inside the
    domain so the corner seed of the flood fill is outside.
    """
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    tris = soup.corners
    if len(tris):
        lo = tris.reshape(-1, 3).min(axis=0)
        hi = tris.reshape(-1, 3).max(axis=0)
        if (lo <= domain.min).any() or (hi >= domain.max).any():
            raise ValueError("domain must strictly contain the model")

    nodes = {}
    ext = domain.extents
    if len(tris) == 0:
        nodes[(0, 0, 0, 0)] = LeafState.UNCLASSIFIED
        return SpaceTree(domain, n_max, nodes)

    # Frontier: cells (n,3) int coords at current depth, candidate triangle
    # index lists in CSR form (indptr, tri_idx).
    cells = np.zeros((1, 3), dtype=np.int64)
    indptr = np.array([0, len(tris)], dtype=np.int64)
    tri_idx = np.arange(len(tris), dtype=np.int64)

    for d in range(n_max + 1):
        counts = np.diff(indptr)
        if d == n_max:
            for c in cells:
                nodes[(d, int(c[0]), int(c[1]), int(c[2]))] = LeafState.CUT
            break
        for c in cells:
            nodes[(d, int(c[0]), int(c[1]), int(c[2]))] = _INTERNAL

        # Expand every frontier cell into its 8 children and pair each child
        # with the parent's candidate triangles.
        child_cells = (cells[:, None, :] * 2 + _CHILD_OFFSETS[None, :, :]).reshape(-1, 3)
        n_cells = len(cells)
        pair_parent = np.repeat(np.arange(n_cells), counts)          # per parent pair
        pair_child = (pair_parent[None, :] * 8 +
                      np.arange(8)[:, None]).reshape(-1)             # child row ids
        pair_tri = np.tile(tri_idx, 8)

        half = ext / (1 << (d + 2))
        centers = domain.min + (child_cells[pair_child].astype(float) + 0.5) * (2.0 * half)
        mask = tris_boxes_overlap(tris[pair_tri], centers, half,
                                  tol=1e-12 * float(half.min()))

        hit_child = pair_child[mask]
        hit_tri = pair_tri[mask]
        overlapped = np.zeros(8 * n_cells, dtype=bool)
        overlapped[hit_child] = True

        for row in np.nonzero(~overlapped)[0]:
            c = child_cells[row]
            nodes[(d + 1, int(c[0]), int(c[1]), int(c[2]))] = LeafState.UNCLASSIFIED

        if not overlapped.any():
            break
        order = np.argsort(hit_child, kind="stable")
        hit_child = hit_child[order]
        hit_tri = hit_tri[order]
        keep_rows, row_counts = np.unique(hit_child, return_counts=True)
        cells = child_cells[keep_rows]
        indptr = np.concatenate([[0], np.cumsum(row_counts)])
        tri_idx = hit_tri
    return SpaceTree(domain, n_max, nodes)


class FilledSpaceTree:
    """Space tree whose non-cut leaves carry inside/outside labels."""

    def __init__(self, tree: SpaceTree, labels: dict, seed_key):
        self.tree = tree
        self.nodes = dict(tree.nodes)
        self.nodes.update(labels)
        self.seed_key = seed_key
        self._filled = SpaceTree(tree.domain, tree.n_max, self.nodes)

    @property
    def domain(self):
        return self.tree.domain

    @property
    def n_max(self):
        return self.tree.n_max

    def leaf_at(self, point):
        return self._filled.leaf_at(point)

    def state_of(self, key) -> LeafState:
        return LeafState(self.nodes[key])

    def leaves(self):
        return self._filled.leaves()

    def state_counts(self):
        return self._filled.state_counts()

    def state_volumes(self):
        return self._filled.state_volumes()

    def leaf_box(self, key):
        return self._filled.leaf_box(key)

    def leaf_center(self, key):
        return self._filled.leaf_center(key)

    def min_leaf_edge(self):
        return self._filled.min_leaf_edge()

    def noncut_neighbor_targets(self, key):
        """(center, state) of every labeled leaf adjacent to a cut leaf,
        including edge and corner neighbors for directional diversity."""
        if self.state_of(key) != LeafState.CUT:
            raise ValueError(f"leaf {key} is not cut")
        out = []
        for nb in self._filled.neighbor_leaves(key, connectivity=26):
            s = LeafState(self.nodes[nb])
            if s in (LeafState.INSIDE, LeafState.OUTSIDE):
                out.append((self._filled.leaf_center(nb), s))
        return out

    def separation_holds(self) -> bool:
        """Certificate that the cut shell seals: no inside leaf shares a
        face with an outside leaf."""
        for key, state in self.leaves():
            if state != LeafState.INSIDE:
                continue
            for nb in self._filled.neighbor_leaves(key, connectivity=6):
                if LeafState(self.nodes[nb]) == LeafState.OUTSIDE:
                    return False
        return True

    def summary_json(self) -> str:
        counts = self.state_counts()
        return json.dumps({
            "n_max": self.n_max,
            "domain_min": self.domain.min.tolist(),
            "domain_max": self.domain.max.tolist(),
            "cut": counts[LeafState.CUT],
            "inside": counts[LeafState.INSIDE],
            "outside": counts[LeafState.OUTSIDE],
            "unclassified": counts[LeafState.UNCLASSIFIED],
        }, indent=2)

    def write_vtk(self, path):
        write_tree_vtk(self, path)


def flood_fill(tree: SpaceTree, seed_key=None, seed_state=LeafState.OUTSIDE) -> FilledSpaceTree:
    """Propagate the seed label across face-connected non-cut leaves.

    Leaves the flood cannot reach get the complementary label.  The default
    seed is a leaf containing a domain box corner (the min corner first),
    which the embedding padding guarantees to be outside the model; corners
    whose leaf is cut are skipped.
    """
    if seed_key is None:
        for cz in (0, 1):
            for cy in (0, 1):
                for cx in (0, 1):
                    key = (0, 0, 0, 0)
                    while tree.nodes[key] == _INTERNAL:
                        d, i, j, k = key
                        key = (d + 1, 2 * i + cx, 2 * j + cy, 2 * k + cz)
                    if tree.nodes[key] != LeafState.CUT:
                        seed_key = key
                        break
                if seed_key is not None:
                    break
            if seed_key is not None:
                break
        if seed_key is None:
            raise ValueError("all domain corner leaves are cut; pass an explicit seed")
    if tree.nodes[seed_key] == LeafState.CUT:
        raise ValueError("seed leaf is cut; choose a leaf with known membership")

    labels = {seed_key: seed_state}
    from collections import deque
    queue = deque([seed_key])
    while queue:
        cur = queue.popleft()
        for nb in tree.neighbor_leaves(cur, connectivity=6):
            if tree.nodes[nb] == LeafState.CUT or nb in labels:
                continue
            labels[nb] = seed_state
            queue.append(nb)

    other = LeafState.INSIDE if seed_state == LeafState.OUTSIDE else LeafState.OUTSIDE
    for key, state in tree.leaves():
        if state == LeafState.UNCLASSIFIED and key not in labels:
            labels[key] = other
    return FilledSpaceTree(tree, labels, seed_key)


@dataclass
class AutoDepthResult:
    chosen: int
    interior_counts: dict     # depth -> inside-leaf count
    flooded_all: dict         # depth -> fill marked every non-cut leaf outside
    first_flooded: int | None


def auto_depth(soup: TriangleSoup, domain: Aabb, depth_cap: int):
    """Find the deepest resolution whose flood fill still sees an interior.

    Depths are tried ascending; once a depth with interior leaves exists,
    the first subsequent depth that floods entirely outside stops the
    search and the previous depth wins.  Shallow depths where everything is
    cut are skipped over.  Raises when no depth yields an interior.

    Returns ``(AutoDepthResult, FilledSpaceTree)`` at the chosen depth.
    """
    if depth_cap < 1:
        raise ValueError("depth_cap must be >= 1")
    interior_counts = {}
    flooded_all = {}
    best = None
    best_filled = None
    first_flooded = None
    for d in range(1, depth_cap + 1):
        tree = build_geo_tree(soup, domain, d)
        try:
            filled = flood_fill(tree)
        except ValueError:
            # Everything down to the corner is cut: too coarse, keep going.
            interior_counts[d] = 0
            flooded_all[d] = False
            continue
        counts = filled.state_counts()
        inside = counts[LeafState.INSIDE]
        noncut = inside + counts[LeafState.OUTSIDE]
        interior_counts[d] = inside
        flooded_all[d] = (noncut > 0 and inside == 0)
        if inside > 0:
            best = d
            best_filled = filled
        elif best is not None:
            first_flooded = d
            break
    if best is None:
        raise RuntimeError("no interior detectable at any depth up to the cap")
    return AutoDepthResult(best, interior_counts, flooded_all, first_flooded), best_filled


def write_tree_vtk(filled: FilledSpaceTree, path):
    """Dump leaf boxes as voxels colored by state (legacy ASCII VTK)."""
    leaves = sorted(filled.leaves())
    pts = []
    cells = []
    states = []
    for key, state in leaves:
        box = filled.leaf_box(key)
        base = len(pts)
        x0, y0, z0 = box.min
        x1, y1, z1 = box.max
        pts += [(x0, y0, z0), (x1, y0, z0), (x0, y1, z0), (x1, y1, z0),
                (x0, y0, z1), (x1, y0, z1), (x0, y1, z1), (x1, y1, z1)]
        cells.append([base + i for i in range(8)])
        states.append(int(state))
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write("dirtyfcm space tree\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(pts)} float\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        fh.write(f"CELLS {len(cells)} {9 * len(cells)}\n")
        for c in cells:
            fh.write("8 " + " ".join(map(str, c)) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        for _ in cells:
            fh.write("11\n")
        fh.write(f"CELL_DATA {len(cells)}\n")
        fh.write("SCALARS state int 1\nLOOKUP_TABLE default\n")
        for s in states:
            fh.write(f"{s}\n")
