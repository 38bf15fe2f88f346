"""Procedural test geometries.

All generators return watertight, consistently outward-oriented
:class:`~dirtyfcm.mesh_io.TriangleSoup` objects with stored normals equal to
the geometric ones.  Shared boundary coordinates are computed once and
reused, so welding at any reasonable tolerance reproduces the intended
topology exactly.
"""

from __future__ import annotations

import numpy as np

from .mesh_io import TriangleSoup

_CUBE_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=float)

# Outward CCW triangles: (bottom, top, front, back, left, right) x 2.
_CUBE_TRIS = [
    (0, 3, 2), (0, 2, 1),
    (4, 5, 6), (4, 6, 7),
    (0, 1, 5), (0, 5, 4),
    (2, 3, 7), (2, 7, 6),
    (0, 4, 7), (0, 7, 3),
    (1, 2, 6), (1, 6, 5),
]


def _soup_from_indexed(points: np.ndarray, tris) -> TriangleSoup:
    corners = points[np.asarray(tris, dtype=int)]
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1)
    norm[norm == 0] = 1.0
    return TriangleSoup(corners, n / norm[:, None])


def cube(origin=(0.0, 0.0, 0.0), size: float = 1.0) -> TriangleSoup:
    """Axis-aligned cube of 12 triangles."""
    pts = np.asarray(origin, dtype=float)[None, :] + size * _CUBE_CORNERS
    return _soup_from_indexed(pts, _CUBE_TRIS)


def box(lo, hi) -> TriangleSoup:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pts = lo[None, :] + _CUBE_CORNERS * (hi - lo)[None, :]
    return _soup_from_indexed(pts, _CUBE_TRIS)


def two_cubes(gap: float = 0.5, size: float = 1.0) -> TriangleSoup:
    """Two disjoint cubes along x, e.g. for multi-component flood tests."""
    a = cube((0.0, 0.0, 0.0), size)
    b = cube((size + gap, 0.0, 0.0), size)
    return TriangleSoup(
        np.concatenate([a.corners, b.corners]),
        np.concatenate([a.normals, b.normals]),
    )


def icosphere(subdivisions: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleSoup:
    """Subdivided icosahedron; 20 * 4**subdivisions facets."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts)
    cache = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = 0.5 * (verts[a] + verts[b])
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(m)
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab = midpoint(a, b)
            bc = midpoint(b, c)
            ca = midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces

    pts = np.asarray(center, dtype=float)[None, :] + radius * np.asarray(verts)
    return _soup_from_indexed(pts, faces)


def gap_cube_script(gap: float, origin=(0.0, 0.0, 0.0), size: float = 1.0):
    """Script disconnecting one +x face triangle from two of its neighbors.

    The model is exploded and the right-angle corner of the lower-right
    +x face triangle is pushed outward by ``gap``, tilting the triangle
    into a flap.  Both leg edges tear open into a through-channel of width
    up to ``gap`` (outside air reaches the interior through the uncovered
    face region under the flap), while the diagonal edge keeps its
    coordinates and re-welds: the output reports exactly the four free
    edges of the two broken shared edges.
    """
    from .flaws import FlawScript, FlawStep

    o = np.asarray(origin, dtype=float)
    s = size
    tri_pt = [o[0] + s, o[1] + 0.66 * s, o[2] + 0.33 * s]
    corner = [o[0] + s, o[1] + s, o[2]]
    return FlawScript(steps=[
        FlawStep("explode"),
        FlawStep("move", {"corner_of_triangle": [tri_pt, corner]},
                 {"displacement": [gap, 0.0, 0.0], "eps": 1.125 * gap}),
    ])


def gap_cube(gap: float, origin=(0.0, 0.0, 0.0), size: float = 1.0):
    """Cube with a torn triangle; returns ``(TriangleSoup, FlawLedger)``."""
    from .flaws import apply_script
    from .mesh_io import index_mesh

    mesh = index_mesh(cube(origin, size), 1e-9 * size)
    return apply_script(mesh, gap_cube_script(gap, origin, size))


def detached_face_cube(gap: float, origin=(0.0, 0.0, 0.0), size: float = 1.0):
    """Cube whose +x lower-right triangle is detached from its two leg
    neighbors and rigidly shifted inward: a uniform slit of width ``gap``.

    Returns the post-detach :class:`IndexedMesh` (edge tables intact).
    """
    from . import flaws
    from .mesh_io import index_mesh

    o = np.asarray(origin, dtype=float)
    s = size
    m = index_mesh(cube(origin, size), 1e-9 * size)
    fid = flaws._resolve_target(
        m, {"face_near": [o[0] + s, o[1] + 0.66 * s, o[2] + 0.33 * s]}, "face")
    off = (-gap, 0.0, 0.0)
    eps = 1.125 * gap
    eids = m.faces[fid].eids
    m = flaws.op_detach(m, eids[0], off, eps, face_id=fid)
    m = flaws.op_detach(m, eids[1], off, eps, face_id=fid)
    return m


def quarter_plate_with_hole(b: float = 4.0, h: float = 4.0, t: float = 1.0,
                            r: float = 1.0, n_arc: int = 24) -> TriangleSoup:
    """Quarter of a thick plate with a cylindrical hole at the corner.

    The solid is [0,b] x [0,h] x [0,t] minus the quarter cylinder
    x^2 + y^2 < r^2.  Requires b == h and an even ``n_arc`` so the 45-degree
    ray hits the outer corner exactly; the top/bottom faces are meshed as
    radial strips between the hole arc and the outer boundary, which keeps
    every surface conforming (no T-junctions).
    """
    if abs(b - h) > 1e-12:
        raise ValueError("generator assumes a square quarter plate (b == h)")
    if n_arc < 2 or n_arc % 2:
        raise ValueError("n_arc must be even and >= 2")
    if not (0 < r < b):
        raise ValueError("hole radius must satisfy 0 < r < b")

    theta = np.linspace(0.0, np.pi / 2.0, n_arc + 1)
    arc = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    outer = np.empty_like(arc)
    for i, th in enumerate(theta):
        if th <= np.pi / 4.0 + 1e-15:
            outer[i] = (b, b * np.tan(th))
        else:
            outer[i] = (h / np.tan(th) if th < np.pi / 2.0 else 0.0, h)
    outer[0] = (b, 0.0)
    outer[-1] = (0.0, h)

    # CCW in the xy-plane: the outer boundary lies to the right of the arc
    # direction, so the strip diagonals run a0 -> o1.
    tris2d = []
    for i in range(n_arc):
        a0, a1 = arc[i], arc[i + 1]
        o0, o1 = outer[i], outer[i + 1]
        tris2d.append((a0, o1, a1))
        tris2d.append((a0, o0, o1))

    corners = []

    def quad(p0, p1, p2, p3):
        corners.append((p0, p1, p2))
        corners.append((p0, p2, p3))

    # Top (+z) and bottom (-z) faces.
    for tri in tris2d:
        top = [np.array([p[0], p[1], t]) for p in tri]
        bot = [np.array([p[0], p[1], 0.0]) for p in reversed(tri)]
        corners.append(tuple(top))
        corners.append(tuple(bot))

    # Hole surface, outward normal pointing toward the axis.
    for i in range(n_arc):
        a0 = np.array([arc[i][0], arc[i][1], 0.0])
        a1 = np.array([arc[i + 1][0], arc[i + 1][1], 0.0])
        b1 = np.array([arc[i + 1][0], arc[i + 1][1], t])
        b0 = np.array([arc[i][0], arc[i][1], t])
        quad(a1, a0, b0, b1)

    # Outer side x = b, subdivided at the ray hits to stay conforming.
    xb = sorted({(float(p[0]), float(p[1])) for p in outer if abs(p[0] - b) < 1e-12},
                key=lambda q: q[1])
    for (x0, y0), (x1, y1) in zip(xb[:-1], xb[1:]):
        quad(np.array([b, y0, 0.0]), np.array([b, y1, 0.0]),
             np.array([b, y1, t]), np.array([b, y0, t]))

    # Outer side y = h.
    yh = sorted({(float(p[0]), float(p[1])) for p in outer if abs(p[1] - h) < 1e-12},
                key=lambda q: q[0])
    for (x0, y0), (x1, y1) in zip(yh[:-1], yh[1:]):
        quad(np.array([x1, h, 0.0]), np.array([x0, h, 0.0]),
             np.array([x0, h, t]), np.array([x1, h, t]))

    # Symmetry strips x = 0 (y in [r, h]) and y = 0 (x in [r, b]).
    quad(np.array([0.0, h, 0.0]), np.array([0.0, r, 0.0]),
         np.array([0.0, r, t]), np.array([0.0, h, t]))
    quad(np.array([r, 0.0, 0.0]), np.array([b, 0.0, 0.0]),
         np.array([b, 0.0, t]), np.array([r, 0.0, t]))

    corners = np.asarray(corners, dtype=float)
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    n = np.cross(e1, e2)
    norm = np.linalg.norm(n, axis=1)
    norm[norm == 0] = 1.0
    return TriangleSoup(corners, n / norm[:, None])
