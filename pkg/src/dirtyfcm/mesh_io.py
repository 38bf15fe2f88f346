"""STL I/O, indexed triangle topology, and validity diagnostics.

Two geometry carriers are used throughout:

* :class:`TriangleSoup` -- a flat list of independent facets, exactly what an
  STL file stores.  It tolerates every kind of defect and is the format all
  downstream stages (space tree, ray casting, integration) consume.
* :class:`IndexedMesh` -- welded vertices plus explicit edge/face adjacency.
  This is the structure on which defects can be described topologically
  (free edges, non-manifold edges, flipped orientations).

Coordinates are model units (mm by convention).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .intersect import Bvh, tri_tri_intersect


class StlParseError(ValueError):
    """Malformed STL input; carries the byte offset where parsing failed."""

    def __init__(self, message, byte_offset=None):
        super().__init__(message)
        self.byte_offset = byte_offset


@dataclass
class TriangleSoup:
    """Independent facets: corners (n,3,3) and stored normals (n,3).

    The stored normal is kept verbatim from the source file; it may disagree
    with the geometric normal, which is a diagnosable defect rather than a
    structural error.
    """

    corners: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=float).reshape(-1, 3, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        if len(self.normals) != len(self.corners):
            raise ValueError("corner/normal count mismatch")
        if not np.isfinite(self.corners).all():
            raise ValueError("non-finite triangle corner")

    def __len__(self):
        return len(self.corners)

    def copy(self) -> "TriangleSoup":
        return TriangleSoup(self.corners.copy(), self.normals.copy())

    @staticmethod
    def empty() -> "TriangleSoup":
        return TriangleSoup(np.zeros((0, 3, 3)), np.zeros((0, 3)))


@dataclass
class Aabb:
    """Axis-aligned box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=float).reshape(3)
        self.max = np.asarray(self.max, dtype=float).reshape(3)
        if (self.min > self.max).any():
            raise ValueError("inverted box")

    @property
    def extents(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))

    def contains(self, points, tol=0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return np.all((pts >= self.min - tol) & (pts <= self.max + tol), axis=1)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))


# ---------------------------------------------------------------------------
# STL reading / writing
# ---------------------------------------------------------------------------

_FACET_BYTES = 50  # 12 f32 + u16 attribute


def load_stl(source) -> TriangleSoup:
    """Read ASCII or binary STL from a path, byte string, or binary stream."""
    data = _read_bytes(source)
    if len(data) >= 84:
        count = struct.unpack_from("<I", data, 80)[0]
        if 84 + _FACET_BYTES * count == len(data):
            return _load_binary(data, count)
    head = data[:256].lstrip()
    if head[:5].lower() == b"solid":
        try:
            return _load_ascii(data)
        except StlParseError:
            raise
    if len(data) < 84:
        raise StlParseError(
            f"file too short for binary STL ({len(data)} bytes)", byte_offset=len(data))
    count = struct.unpack_from("<I", data, 80)[0]
    raise StlParseError(
        f"binary STL declares {count} facets but payload holds "
        f"{(len(data) - 84) // _FACET_BYTES}", byte_offset=84)


def _read_bytes(source) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def _load_binary(data: bytes, count: int) -> TriangleSoup:
    raw = np.frombuffer(data, dtype=np.uint8, count=_FACET_BYTES * count, offset=84)
    rec = raw.reshape(count, _FACET_BYTES)[:, :48].copy().view("<f4").reshape(count, 4, 3)
    normals = rec[:, 0].astype(float)
    corners = rec[:, 1:4].astype(float)
    return TriangleSoup(corners, normals)


def _load_ascii(data: bytes) -> TriangleSoup:
    text = data.decode("ascii", errors="replace")
    normals = []
    corners = []
    cur_normal = None
    cur_pts = []
    for ln, line in enumerate(text.splitlines(), start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "facet":
            if len(tok) < 5 or tok[1] != "normal":
                raise StlParseError(f"bad facet line {ln}: {line.strip()!r}")
            cur_normal = [float(t) for t in tok[2:5]]
            cur_pts = []
        elif tok[0] == "vertex":
            if len(tok) != 4:
                raise StlParseError(f"bad vertex line {ln}: {line.strip()!r}")
            cur_pts.append([float(t) for t in tok[1:4]])
        elif tok[0] == "endfacet":
            if cur_normal is None or len(cur_pts) != 3:
                raise StlParseError(f"facet ending at line {ln} has {len(cur_pts)} vertices")
            normals.append(cur_normal)
            corners.append(cur_pts)
            cur_normal = None
    if not corners:
        return TriangleSoup.empty()
    return TriangleSoup(np.asarray(corners), np.asarray(normals))


def save_stl(soup: TriangleSoup, fmt: str = "binary") -> bytes:
    """Serialize a soup.  Binary is canonical: load(save(s)) is bit-exact
    whenever coordinates are f32-representable (binary STL stores f32)."""
    if fmt == "binary":
        header = b"dirtyfcm binary stl".ljust(80, b" ")
        out = bytearray(header)
        out += struct.pack("<I", len(soup))
        rec = np.zeros((len(soup), _FACET_BYTES), dtype=np.uint8)
        if len(soup):
            block = np.ascontiguousarray(np.concatenate(
                [soup.normals[:, None, :], soup.corners], axis=1).astype("<f4"))
            rec[:, :48] = block.reshape(len(soup), 12).view(np.uint8)
        out += rec.tobytes()
        return bytes(out)
    if fmt == "ascii":
        buf = io.StringIO()
        buf.write("solid dirtyfcm\n")
        for n, tri in zip(soup.normals, soup.corners):
            buf.write(f"  facet normal {n[0]:.9e} {n[1]:.9e} {n[2]:.9e}\n")
            buf.write("    outer loop\n")
            for p in tri:
                buf.write(f"      vertex {p[0]:.9e} {p[1]:.9e} {p[2]:.9e}\n")
            buf.write("    endloop\n")
            buf.write("  endfacet\n")
        buf.write("endsolid dirtyfcm\n")
        return buf.getvalue().encode("ascii")
    raise ValueError(f"unknown STL format {fmt!r}")


def write_stl(soup: TriangleSoup, path, fmt: str = "binary"):
    with open(path, "wb") as fh:
        fh.write(save_stl(soup, fmt))


# ---------------------------------------------------------------------------
# Indexed topology
# ---------------------------------------------------------------------------

@dataclass
class Face:
    vids: tuple          # 3 vertex ids, winding order
    eids: tuple          # edge ids (fewer for degenerate faces)
    normal: np.ndarray   # stored normal, verbatim


@dataclass
class Edge:
    vids: tuple          # canonical (lo, hi) vertex id pair
    face_ids: list       # incident faces


@dataclass
class IndexedMesh:
    """Welded vertices, faces, and explicit edge adjacency.

    Freshly indexed meshes satisfy: no two vertices closer than the weld
    tolerance, edges derivable from faces, adjacency consistent.  Defect
    operators deliberately break those properties afterwards; the tables are
    maintained so the breakage stays diagnosable.
    """

    vertices: dict = field(default_factory=dict)   # vid -> np.ndarray(3)
    faces: dict = field(default_factory=dict)      # fid -> Face
    edges: dict = field(default_factory=dict)      # eid -> Edge
    weld_tol: float = 0.0
    degenerate_face_ids: list = field(default_factory=list)

    @property
    def id_watermark(self) -> int:
        ids = list(self.vertices) + list(self.faces) + list(self.edges)
        return max(ids) + 1 if ids else 0

    def face_corners(self, fid) -> np.ndarray:
        f = self.faces[fid]
        return np.array([self.vertices[v] for v in f.vids])

    def all_corners(self) -> np.ndarray:
        fids = sorted(self.faces)
        if not fids:
            return np.zeros((0, 3, 3))
        return np.stack([self.face_corners(f) for f in fids])

    def copy(self) -> "IndexedMesh":
        m = IndexedMesh(weld_tol=self.weld_tol)
        m.vertices = {k: v.copy() for k, v in self.vertices.items()}
        m.faces = {k: Face(f.vids, f.eids, f.normal.copy()) for k, f in self.faces.items()}
        m.edges = {k: Edge(e.vids, list(e.face_ids)) for k, e in self.edges.items()}
        m.degenerate_face_ids = list(self.degenerate_face_ids)
        return m


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        p = self.parent
        while p[a] != a:
            p[a] = p[p[a]]
            a = p[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def index_mesh(soup: TriangleSoup, weld_tol: float = None) -> IndexedMesh:
    """Weld coincident corners and build faces, edges, and adjacency.

    ``weld_tol`` defaults to 1e-6 times the bounding-box diagonal.  Welding
    is a union-find over a spatial hash, so chains of near-coincident points
    may merge transitively; canonical coordinates come from the first corner
    seen for each group.
    """
    pts = soup.corners.reshape(-1, 3)
    if weld_tol is None:
        if len(pts):
            diag = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
        else:
            diag = 0.0
        weld_tol = 1e-6 * diag
    if weld_tol < 0:
        raise ValueError("weld tolerance must be >= 0")

    n = len(pts)
    uf = _UnionFind(n)
    if n:
        if weld_tol == 0.0:
            seen = {}
            for i in range(n):
                key = pts[i].tobytes()
                if key in seen:
                    uf.union(seen[key], i)
                else:
                    seen[key] = i
        else:
            cell = weld_tol
            keys = np.floor(pts / cell).astype(np.int64)
            buckets = {}
            for i in range(n):
                buckets.setdefault(tuple(keys[i]), []).append(i)
            tol2 = weld_tol * weld_tol
            offs = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
            for i in range(n):
                kx, ky, kz = keys[i]
                for off in offs:
                    cand = buckets.get((kx + off[0], ky + off[1], kz + off[2]))
                    if not cand:
                        continue
                    for j in cand:
                        if j >= i:
                            continue
                        d = pts[i] - pts[j]
                        if d @ d <= tol2:
                            uf.union(i, j)

    mesh = IndexedMesh(weld_tol=weld_tol)
    rep_to_vid = {}
    corner_vid = np.zeros(n, dtype=int)
    for i in range(n):
        r = uf.find(i)
        if r not in rep_to_vid:
            vid = len(rep_to_vid)
            rep_to_vid[r] = vid
            mesh.vertices[vid] = pts[r].copy()
        corner_vid[i] = rep_to_vid[r]

    edge_lookup = {}
    for t in range(len(soup)):
        vids = tuple(corner_vid[3 * t:3 * t + 3])
        fid = t
        if len(set(vids)) < 3:
            mesh.degenerate_face_ids.append(fid)
        eids = []
        for a in range(3):
            va, vb = vids[a], vids[(a + 1) % 3]
            if va == vb:
                continue
            key = (min(va, vb), max(va, vb))
            if key not in edge_lookup:
                eid = len(edge_lookup)
                edge_lookup[key] = eid
                mesh.edges[eid] = Edge(key, [])
            eid = edge_lookup[key]
            if fid not in mesh.edges[eid].face_ids:
                mesh.edges[eid].face_ids.append(fid)
            if eid not in eids:
                eids.append(eid)
        mesh.faces[fid] = Face(vids, tuple(eids), soup.normals[t].copy())

    # Edge ids were allocated interleaved with faces; renumber vertices and
    # edges into the face-scan order already used, then shift face ids so the
    # three tables never collide.  Keeping id spaces disjoint lets defect
    # operators allocate fresh ids from a single watermark.
    nv, ne = len(mesh.vertices), len(mesh.edges)
    mesh.faces = {fid + nv + ne: f for fid, f in mesh.faces.items()}
    mesh.degenerate_face_ids = [f + nv + ne for f in mesh.degenerate_face_ids]
    for f in mesh.faces.values():
        f.eids = tuple(e + nv for e in f.eids)
    mesh.edges = {eid + nv: Edge(e.vids, [f + nv + ne for f in e.face_ids])
                  for eid, e in mesh.edges.items()}
    return mesh


# ---------------------------------------------------------------------------
# Validity diagnostics
# ---------------------------------------------------------------------------

@dataclass
class TopologyReport:
    free_edge_count: int
    free_edge_ids: list
    non_manifold_edge_count: int
    duplicate_face_count: int
    inconsistent_orientation_pair_count: int
    self_intersection_pair_count: int
    watertight: bool

    def to_json(self) -> str:
        return json.dumps({
            "free_edge_count": self.free_edge_count,
            "free_edge_ids": list(map(int, self.free_edge_ids)),
            "non_manifold_edge_count": self.non_manifold_edge_count,
            "duplicate_face_count": self.duplicate_face_count,
            "inconsistent_orientation_pair_count": self.inconsistent_orientation_pair_count,
            "self_intersection_pair_count": self.self_intersection_pair_count,
            "watertight": self.watertight,
        }, indent=2)


def topology_report(mesh: IndexedMesh, check_self_intersections: bool = True) -> TopologyReport:
    """Count the defect signatures of an indexed mesh.

    Free / non-manifold edges come from the maintained adjacency tables.
    Duplicate faces are detected geometrically (identical corner coordinate
    sets up to the weld tolerance), so copies joined without welding are
    found too.  The self-intersection scan tests all box-overlapping face
    pairs and counts a pair only when the triangle interiors meet; contacts
    confined to shared edges or vertices, welded or merely coincident, are
    legitimate neighbor contacts and excluded.
    """
    free = sorted(eid for eid, e in mesh.edges.items() if len(e.face_ids) == 1)
    non_manifold = sum(1 for e in mesh.edges.values() if len(e.face_ids) > 2)

    dup = _duplicate_face_count(mesh)
    inconsistent = _orientation_inconsistencies(mesh)
    selfx = _self_intersections(mesh) if check_self_intersections else 0

    watertight = (len(free) == 0) and (non_manifold == 0) and (inconsistent == 0)
    return TopologyReport(
        free_edge_count=len(free),
        free_edge_ids=free,
        non_manifold_edge_count=non_manifold,
        duplicate_face_count=dup,
        inconsistent_orientation_pair_count=inconsistent,
        self_intersection_pair_count=selfx,
        watertight=watertight,
    )


def _duplicate_face_count(mesh: IndexedMesh) -> int:
    tol = mesh.weld_tol if mesh.weld_tol > 0 else 1e-12
    groups = {}
    for fid in sorted(mesh.faces):
        pts = mesh.face_corners(fid)
        key = tuple(sorted(tuple(np.round(p / tol).astype(np.int64)) for p in pts))
        groups.setdefault(key, []).append(fid)
    return sum(len(g) - 1 for g in groups.values() if len(g) > 1)


def _face_edge_direction(mesh: IndexedMesh, fid, edge: Edge):
    """How the face traverses the edge: +1 for lo->hi, -1 for hi->lo."""
    vids = mesh.faces[fid].vids
    lo, hi = edge.vids
    for a in range(3):
        va, vb = vids[a], vids[(a + 1) % 3]
        if (va, vb) == (lo, hi):
            return 1
        if (va, vb) == (hi, lo):
            return -1
    return 0


def _orientation_inconsistencies(mesh: IndexedMesh) -> int:
    bad = 0
    for edge in mesh.edges.values():
        if len(edge.face_ids) != 2:
            continue
        fa, fb = edge.face_ids
        da = _face_edge_direction(mesh, fa, edge)
        db = _face_edge_direction(mesh, fb, edge)
        if da == 0 or db == 0:
            continue  # face no longer references both endpoints (detached)
        if da == db:
            bad += 1
    return bad


def _self_intersections(mesh: IndexedMesh) -> int:
    fids = sorted(mesh.faces)
    fids = [f for f in fids if f not in set(mesh.degenerate_face_ids)]
    if len(fids) < 2:
        return 0
    tris = np.stack([mesh.face_corners(f) for f in fids])
    bvh = Bvh(tris)
    count = 0
    for i, fid in enumerate(fids):
        lo = tris[i].min(axis=0)
        hi = tris[i].max(axis=0)
        for j in bvh.query_box(lo, hi):
            if j <= i:
                continue
            if set(mesh.faces[fid].vids) & set(mesh.faces[fids[j]].vids):
                continue  # welded neighbors: shared-edge/vertex contact
            if tri_tri_intersect(tris[i], tris[j]):
                count += 1
    return count


# ---------------------------------------------------------------------------
# Embedding boxes
# ---------------------------------------------------------------------------

FLAT_FLOOR = 1e-3  # fraction of the diagonal used to fatten flat axes


def bounding_box(soup: TriangleSoup, padding_fraction: float = 0.0) -> Aabb:
    """Tight box of the soup, expanded by ``padding_fraction`` of the extent
    per side.  Axes with (near-)zero extent are fattened to at least
    ``FLAT_FLOOR`` times the diagonal so the result is always a 3D box.
    """
    if len(soup) == 0:
        raise ValueError("bounding box of empty soup")
    pts = soup.corners.reshape(-1, 3)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    ext = hi - lo
    diag = float(np.linalg.norm(ext))
    floor = FLAT_FLOOR * (diag if diag > 0 else 1.0)
    pad = padding_fraction * ext
    lo = lo - pad
    hi = hi + pad
    for a in range(3):
        if hi[a] - lo[a] < floor:
            c = 0.5 * (lo[a] + hi[a])
            lo[a] = c - 0.5 * floor
            hi[a] = c + 0.5 * floor
    return Aabb(lo, hi)


def explode(mesh: IndexedMesh) -> TriangleSoup:
    """Forget all adjacency: one independent triangle per face."""
    fids = sorted(mesh.faces)
    if not fids:
        return TriangleSoup.empty()
    corners = np.stack([mesh.face_corners(f) for f in fids])
    normals = np.stack([mesh.faces[f].normal for f in fids])
    return TriangleSoup(corners, normals)
