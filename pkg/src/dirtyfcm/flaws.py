"""Defect operators: turn a valid indexed mesh into a controlled dirty model.

Each operator imposes one defect class (double entities, missing faces,
flipped orientations, gaps, curve mismatches, intersections) with an explicit
size bound ``eps``.  Operators never mutate their input; they return modified
copies plus measurement records, so a scripted sequence is reproducible and
every perturbation magnitude lands in a ledger.

The mesh-level operators keep the edge/face tables consistent with the
defect being modeled rather than re-deriving them: detaching a face from an
edge, for instance, leaves the face's other edges in place so only the
detached edge pair shows up as free, while the geometry underneath them no
longer coincides.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .intersect import Bvh, points_tris_distance, tri_tri_intersect
from .mesh_io import Edge, Face, IndexedMesh, TriangleSoup, explode, index_mesh


class FlawRefusal(ValueError):
    """Operator precondition violated; carries the measured quantity."""

    def __init__(self, message, measured=None):
        super().__init__(message)
        self.measured = measured


class FlawScriptError(RuntimeError):
    """A script step failed; carries the zero-based step index."""

    def __init__(self, step_index, cause):
        super().__init__(f"step {step_index}: {cause}")
        self.step_index = step_index
        self.cause = cause


@dataclass
class Segment:
    """A face with its edges, vertices, and geometry, cut loose from the
    mesh: external adjacency is forgotten, internal relations kept."""

    face_id: int
    vids: tuple
    eids: tuple
    coords: dict           # vid -> np.ndarray(3)
    edge_vids: dict        # eid -> (vid, vid)
    normal: np.ndarray

    def all_ids(self):
        return {self.face_id, *self.vids, *self.eids}


def op_select(mesh: IndexedMesh, face_id: int) -> Segment:
    """Extract the face segment; the source mesh is untouched."""
    if face_id not in mesh.faces:
        raise KeyError(f"unknown face id {face_id}")
    f = mesh.faces[face_id]
    return Segment(
        face_id=face_id,
        vids=tuple(f.vids),
        eids=tuple(f.eids),
        coords={v: mesh.vertices[v].copy() for v in f.vids},
        edge_vids={e: mesh.edges[e].vids for e in f.eids},
        normal=f.normal.copy(),
    )


def op_deep_copy(segment: Segment, start_id: int = None) -> Segment:
    """Fresh ids throughout, internal relations re-pointed, equal geometry."""
    if start_id is None:
        start_id = max(segment.all_ids()) + 1
    next_id = start_id
    vmap = {}
    for v in segment.vids:
        vmap[v] = next_id
        next_id += 1
    emap = {}
    for e in segment.eids:
        emap[e] = next_id
        next_id += 1
    return Segment(
        face_id=next_id,
        vids=tuple(vmap[v] for v in segment.vids),
        eids=tuple(emap[e] for e in segment.eids),
        coords={vmap[v]: c.copy() for v, c in segment.coords.items()},
        edge_vids={emap[e]: tuple(vmap[v] for v in vv)
                   for e, vv in segment.edge_vids.items()},
        normal=segment.normal.copy(),
    )


def op_join(mesh: IndexedMesh, segment: Segment):
    """Append the segment's entities without welding.

    Entities whose ids already exist in the mesh are not duplicated (a join
    of a non-copied segment is a set union); their ids come back in the
    second return value so a ledger can flag the duplicate reference.

    Returns ``(mesh', collided_ids)``.
    """
    out = mesh.copy()
    collided = sorted(segment.all_ids() & (set(out.vertices) | set(out.edges) | set(out.faces)))
    if segment.face_id in out.faces:
        return out, collided
    for v in segment.vids:
        if v not in out.vertices:
            out.vertices[v] = segment.coords[v].copy()
    for e in segment.eids:
        if e not in out.edges:
            out.edges[e] = Edge(tuple(segment.edge_vids[e]), [])
        if segment.face_id not in out.edges[e].face_ids:
            out.edges[e].face_ids.append(segment.face_id)
    out.faces[segment.face_id] = Face(segment.vids, segment.eids, segment.normal.copy())
    return out, collided


def inscribed_diameter(corners: np.ndarray) -> float:
    """Diameter of the triangle's inscribed circle: 2 * area / semiperimeter."""
    a = np.linalg.norm(corners[1] - corners[0])
    b = np.linalg.norm(corners[2] - corners[1])
    c = np.linalg.norm(corners[0] - corners[2])
    s = 0.5 * (a + b + c)
    if s == 0:
        return 0.0
    area = 0.5 * np.linalg.norm(np.cross(corners[1] - corners[0], corners[2] - corners[0]))
    return float(2.0 * area / s)


def op_delete(mesh: IndexedMesh, face_id: int, eps: float) -> IndexedMesh:
    """Remove a face whose opening stays below eps (inscribed diameter)."""
    if face_id not in mesh.faces:
        raise KeyError(f"unknown face id {face_id}")
    delta = inscribed_diameter(mesh.face_corners(face_id))
    if delta >= eps:
        raise FlawRefusal(
            f"opening size {delta:.6g} not below eps {eps:.6g}", measured=delta)
    out = mesh.copy()
    f = out.faces.pop(face_id)
    for e in f.eids:
        edge = out.edges[e]
        if face_id in edge.face_ids:
            edge.face_ids.remove(face_id)
        if not edge.face_ids:
            del out.edges[e]
    used = {v for g in out.faces.values() for v in g.vids}
    used |= {v for e in out.edges.values() for v in e.vids}
    for v in f.vids:
        if v not in used and v in out.vertices:
            del out.vertices[v]
    if face_id in out.degenerate_face_ids:
        out.degenerate_face_ids.remove(face_id)
    return out


def op_explode(mesh: IndexedMesh) -> TriangleSoup:
    """Drop all adjacency: one independent triangle per face."""
    return explode(mesh)


def op_flip(target, face_id):
    """Negate the stored normal and reverse the winding of one face.

    Both encodings of orientation are flipped together so they stay
    consistent with each other while disagreeing with the neighbors.
    Works on a mesh face id or on a soup triangle index.
    """
    if isinstance(target, TriangleSoup):
        out = target.copy()
        out.corners[face_id] = out.corners[face_id][::-1]
        out.normals[face_id] = -out.normals[face_id]
        return out
    out = target.copy()
    f = out.faces[face_id]
    out.faces[face_id] = Face(tuple(reversed(f.vids)), f.eids, -f.normal)
    return out


@dataclass
class MoveRecord:
    distance: float
    gap: float           # separation opened between formerly coincident corners
    affected: tuple


def op_move(target, entity, displacement, eps: float):
    """Move one vertex (mesh) or one facet corner (soup) by less than eps.

    On a mesh the shared vertex moves and every incident face follows, so
    the surface deforms but stays closed.  On a soup only the addressed
    corner moves, tearing it away from the corners it used to coincide
    with; the opened separation is measured and returned.

    Returns ``(modified, MoveRecord)``.
    """
    d = np.asarray(displacement, dtype=float).reshape(3)
    dist = float(np.linalg.norm(d))
    if not (0.0 < dist < eps):
        raise FlawRefusal(
            f"|displacement| = {dist:.6g} outside (0, {eps:.6g})", measured=dist)

    if isinstance(target, TriangleSoup):
        t, k = entity
        out = target.copy()
        old = out.corners[t, k].copy()
        pts = out.corners.reshape(-1, 3)
        scale = float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))) if len(pts) else 1.0
        tol = 1e-9 * max(scale, 1.0)
        coincident = np.linalg.norm(pts - old[None, :], axis=1) <= tol
        coincident[3 * t + k] = False
        out.corners[t, k] = old + d
        if coincident.any():
            gap = float(np.linalg.norm(pts[coincident] - (old + d)[None, :], axis=1).max())
        else:
            gap = 0.0
        return out, MoveRecord(distance=dist, gap=gap, affected=(t, k))

    vid = entity
    if vid not in target.vertices:
        raise KeyError(f"unknown vertex id {vid}")
    out = target.copy()
    out.vertices[vid] = out.vertices[vid] + d
    return out, MoveRecord(distance=dist, gap=0.0, affected=(vid,))


def op_detach(mesh: IndexedMesh, edge_id: int, offset, eps: float,
              face_id: int = None) -> IndexedMesh:
    """Detach one face from a shared edge, offsetting its side of the curve.

    The chosen incident face gets private copies of the edge's endpoint
    vertices, translated by ``offset``; the old edge and its private
    replacement each end up with a single face, i.e. two free edges.  A
    corner that is already private to the face (from an earlier detach) is
    reused untranslated, so successive detaches on one face share a single
    rigid offset.
    """
    if edge_id not in mesh.edges:
        raise KeyError(f"unknown edge id {edge_id}")
    off = np.asarray(offset, dtype=float).reshape(3)
    if not np.linalg.norm(off) < eps:
        raise FlawRefusal(
            f"|offset| = {np.linalg.norm(off):.6g} not below eps {eps:.6g}",
            measured=float(np.linalg.norm(off)))
    edge = mesh.edges[edge_id]
    if len(edge.face_ids) != 2:
        raise FlawRefusal(
            f"edge {edge_id} has {len(edge.face_ids)} incident faces, need 2")
    if face_id is None:
        face_id = min(edge.face_ids)
    if face_id not in edge.face_ids:
        raise KeyError(f"face {face_id} not incident to edge {edge_id}")

    out = mesh.copy()
    face = out.faces[face_id]
    next_id = out.id_watermark

    new_vids = list(face.vids)
    new_edge_vids = []
    for v in out.edges[edge_id].vids:
        if v in new_vids:
            copy_id = next_id
            next_id += 1
            out.vertices[copy_id] = out.vertices[v] + off
            new_vids[new_vids.index(v)] = copy_id
            new_edge_vids.append(copy_id)
        else:
            # Corner privatized by an earlier detach of this face: reuse it
            # untranslated so successive detaches share one rigid offset.
            base = out.vertices[v]
            priv = min(new_vids, key=lambda w: float(np.linalg.norm(out.vertices[w] - base)))
            new_edge_vids.append(priv)

    new_eid = next_id
    next_id += 1
    va, vb = new_edge_vids
    out.edges[new_eid] = Edge((min(va, vb), max(va, vb)), [face_id])
    out.edges[edge_id].face_ids.remove(face_id)
    eids = tuple(new_eid if e == edge_id else e for e in face.eids)
    out.faces[face_id] = Face(tuple(new_vids), eids, face.normal)
    return out


@dataclass
class IntersectRecord:
    new_pair_count: int
    achieved: bool
    moved_face: int


def op_intersect_move(target, face_id, displacement, eps: float,
                      duplicate: bool = False):
    """Translate a face (optionally a fresh copy of it) to provoke contact.

    With ``duplicate`` the face is deep-copied and joined first, then the
    copy moves: offsets and floating artifacts.  Without it the original
    face's own corners translate.  The result is validated by a
    triangle-triangle scan counting intersecting pairs that involve the
    moved face; when nothing ends up intersecting the record says so
    instead of raising.

    Returns ``(modified, IntersectRecord)``.
    """
    d = np.asarray(displacement, dtype=float).reshape(3)
    if not np.linalg.norm(d) < eps:
        raise FlawRefusal(
            f"|displacement| = {np.linalg.norm(d):.6g} not below eps {eps:.6g}",
            measured=float(np.linalg.norm(d)))

    if isinstance(target, TriangleSoup):
        out = target.copy()
        if duplicate:
            out = TriangleSoup(
                np.concatenate([out.corners, out.corners[face_id][None]]),
                np.concatenate([out.normals, out.normals[face_id][None]]))
            moved = len(out) - 1
        else:
            moved = face_id
        out.corners[moved] = out.corners[moved] + d[None, :]
        count = _soup_pairs_with(out, moved)
        return out, IntersectRecord(count, count > 0, moved)

    mesh = target
    if duplicate:
        seg = op_deep_copy(op_select(mesh, face_id), mesh.id_watermark)
        out, _ = op_join(mesh, seg)
        moved = seg.face_id
        for v in seg.vids:
            out.vertices[v] = out.vertices[v] + d
    else:
        out = mesh.copy()
        moved = face_id
        for v in out.faces[face_id].vids:
            out.vertices[v] = out.vertices[v] + d
    count = _mesh_pairs_with(out, moved)
    return out, IntersectRecord(count, count > 0, moved)


def _soup_pairs_with(soup: TriangleSoup, idx: int) -> int:
    tri = soup.corners[idx]
    bvh = Bvh(soup.corners)
    count = 0
    for j in bvh.query_box(tri.min(axis=0), tri.max(axis=0)):
        if j == idx:
            continue
        if tri_tri_intersect(tri, soup.corners[j]):
            count += 1
    return count


def _mesh_pairs_with(mesh: IndexedMesh, fid: int) -> int:
    tri = mesh.face_corners(fid)
    vset = set(mesh.faces[fid].vids)
    count = 0
    for other in sorted(mesh.faces):
        if other == fid:
            continue
        if vset & set(mesh.faces[other].vids):
            continue
        if tri_tri_intersect(tri, mesh.face_corners(other)):
            count += 1
    return count


# ---------------------------------------------------------------------------
# Opening measurement
# ---------------------------------------------------------------------------

def measure_max_opening(soup: TriangleSoup, weld_tol: float = None) -> float:
    """Width of the largest opening in a soup.

    The soup is indexed at the weld tolerance; for every free edge the
    distance from its midpoint to the nearest non-incident triangle is
    taken, and the maximum over free edges is returned.  A closed model
    (or one whose free-edge midpoints still touch their neighbors) measures
    zero.
    """
    if len(soup) == 0:
        return 0.0
    mesh = index_mesh(soup, weld_tol)
    fids = sorted(mesh.faces)
    fpos = {f: i for i, f in enumerate(fids)}
    tris = np.stack([mesh.face_corners(f) for f in fids])
    worst = 0.0
    for eid, edge in mesh.edges.items():
        if len(edge.face_ids) != 1:
            continue
        va, vb = edge.vids
        mid = 0.5 * (mesh.vertices[va] + mesh.vertices[vb])
        mask = np.ones(len(fids), dtype=bool)
        for f in edge.face_ids:
            mask[fpos[f]] = False
        if not mask.any():
            continue
        dist = points_tris_distance(mid[None, :], tris[mask])[0]
        if np.isfinite(dist):
            worst = max(worst, float(dist))
    return worst


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------

SCRIPT_VERSION = 1

_GAP_OPS = {"delete", "move", "detach"}


@dataclass
class FlawStep:
    operator: str
    target: object = None
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class FlawScript:
    steps: list
    seed: int = 0
    version: int = SCRIPT_VERSION

    def to_json(self) -> str:
        return json.dumps({
            "version": self.version,
            "seed": self.seed,
            "steps": [{"operator": s.operator, "target": s.target,
                       "params": s.params, "seed": s.seed} for s in self.steps],
        }, indent=2)

    @staticmethod
    def from_json(text: str) -> "FlawScript":
        data = json.loads(text)
        if data.get("version") != SCRIPT_VERSION:
            raise ValueError(f"unsupported script version {data.get('version')!r}")
        steps = [FlawStep(s["operator"], s.get("target"), s.get("params", {}),
                          s.get("seed", 0)) for s in data["steps"]]
        return FlawScript(steps, seed=data.get("seed", 0))


@dataclass
class StepRecord:
    operator: str
    target: object
    measured_size: float
    affected: list


@dataclass
class FlawLedger:
    steps: list
    eps_gap: float          # largest opening of the final soup (midpoint rule)
    eps_gap_steps: float    # largest per-step measured size of gap-creating ops
    duplicate_references: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "eps_gap": self.eps_gap,
            "eps_gap_steps": self.eps_gap_steps,
            "duplicate_references": self.duplicate_references,
            "steps": [{"operator": s.operator, "target": _jsonable(s.target),
                       "measured_size": s.measured_size,
                       "affected": _jsonable(s.affected)} for s in self.steps],
        }, indent=2)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _resolve_target(state, target, kind):
    """Resolve a script target: a raw id/index or a nearest-entity selector.

    Selectors ({"face_near": [x,y,z]} etc.) pick the entity whose centroid
    or position is closest to the given point, which keeps scripts stable
    when fixtures are re-tessellated.
    """
    if not isinstance(target, dict):
        if kind == "corner" and isinstance(target, (list, tuple)):
            return tuple(int(v) for v in target)
        return target
    if len(target) != 1:
        raise ValueError(f"bad target spec {target!r}")
    (key, point), = target.items()
    if key == "corner_of_triangle":
        # Two-point form: pick the triangle by centroid, then the corner.
        if not isinstance(state, TriangleSoup):
            raise ValueError("corner_of_triangle only applies to exploded models")
        tri_pt = np.asarray(point[0], dtype=float)
        cor_pt = np.asarray(point[1], dtype=float)
        cent = state.corners.mean(axis=1)
        t = int(np.argmin(np.linalg.norm(cent - tri_pt[None, :], axis=1)))
        k = int(np.argmin(np.linalg.norm(state.corners[t] - cor_pt[None, :], axis=1)))
        return (t, k)
    p = np.asarray(point, dtype=float)
    if isinstance(state, TriangleSoup):
        if key == "triangle_near" or key == "face_near":
            cent = state.corners.mean(axis=1)
            return int(np.argmin(np.linalg.norm(cent - p[None, :], axis=1)))
        if key == "corner_near":
            pts = state.corners.reshape(-1, 3)
            i = int(np.argmin(np.linalg.norm(pts - p[None, :], axis=1)))
            return (i // 3, i % 3)
        raise ValueError(f"selector {key!r} not valid on an exploded model")
    if key == "face_near":
        fids = sorted(state.faces)
        cent = np.stack([state.face_corners(f).mean(axis=0) for f in fids])
        return fids[int(np.argmin(np.linalg.norm(cent - p[None, :], axis=1)))]
    if key == "vertex_near":
        vids = sorted(state.vertices)
        pts = np.stack([state.vertices[v] for v in vids])
        return vids[int(np.argmin(np.linalg.norm(pts - p[None, :], axis=1)))]
    if key == "edge_near":
        eids = sorted(state.edges)
        mids = np.stack([0.5 * (state.vertices[state.edges[e].vids[0]] +
                                state.vertices[state.edges[e].vids[1]]) for e in eids])
        return eids[int(np.argmin(np.linalg.norm(mids - p[None, :], axis=1)))]
    raise ValueError(f"unknown selector {key!r}")


def _step_displacement(params, rng):
    if "displacement" in params:
        return np.asarray(params["displacement"], dtype=float)
    if "offset" in params:
        return np.asarray(params["offset"], dtype=float)
    if "random_magnitude" in params:
        v = rng.normal(size=3)
        v /= np.linalg.norm(v)
        return v * float(params["random_magnitude"])
    raise ValueError("step needs 'displacement', 'offset', or 'random_magnitude'")


def apply_script(mesh: IndexedMesh, script: FlawScript):
    """Run a flaw script and explode the result.

    Steps apply in order; mesh-level operators refuse to run once the model
    has been exploded.  Any refusal aborts with the step index.  The ledger
    records each step's measured size plus the final model's largest
    opening.

    Returns ``(TriangleSoup, FlawLedger)``.
    """
    state = mesh.copy()
    records = []
    duplicates = []
    for i, step in enumerate(script.steps):
        rng = np.random.default_rng((script.seed, step.seed, i))
        try:
            state, rec = _apply_step(state, step, rng, duplicates)
        except (FlawRefusal, KeyError, ValueError) as exc:
            raise FlawScriptError(i, exc) from exc
        records.append(rec)

    soup = state if isinstance(state, TriangleSoup) else op_explode(state)
    eps_gap = measure_max_opening(soup)
    gap_steps = [r.measured_size for r in records
                 if r.operator in _GAP_OPS and r.measured_size > 0]
    ledger = FlawLedger(
        steps=records,
        eps_gap=eps_gap,
        eps_gap_steps=max(gap_steps) if gap_steps else 0.0,
        duplicate_references=duplicates,
    )
    return soup, ledger


def _require_mesh(state, op):
    if isinstance(state, TriangleSoup):
        raise ValueError(f"operator {op!r} needs an indexed mesh, model already exploded")
    return state


def _apply_step(state, step: FlawStep, rng, duplicates):
    op = step.operator
    params = step.params or {}

    if op == "explode":
        m = _require_mesh(state, op)
        return op_explode(m), StepRecord(op, None, 0.0, [])

    if op == "duplicate":
        m = _require_mesh(state, op)
        fid = _resolve_target(m, step.target, "face")
        seg = op_deep_copy(op_select(m, fid), m.id_watermark)
        out, collided = op_join(m, seg)
        duplicates.extend(collided)
        return out, StepRecord(op, fid, 0.0, [seg.face_id])

    if op == "delete":
        m = _require_mesh(state, op)
        fid = _resolve_target(m, step.target, "face")
        delta = inscribed_diameter(m.face_corners(fid))
        out = op_delete(m, fid, float(params["eps"]))
        return out, StepRecord(op, fid, delta, [fid])

    if op == "flip":
        if isinstance(state, TriangleSoup):
            idx = _resolve_target(state, step.target, "face")
            return op_flip(state, idx), StepRecord(op, idx, 0.0, [idx])
        fid = _resolve_target(state, step.target, "face")
        return op_flip(state, fid), StepRecord(op, fid, 0.0, [fid])

    if op == "move":
        d = _step_displacement(params, rng)
        eps = float(params["eps"])
        if isinstance(state, TriangleSoup):
            entity = _resolve_target(state, step.target, "corner")
            out, rec = op_move(state, entity, d, eps)
            return out, StepRecord(op, entity, rec.gap if rec.gap > 0 else rec.distance,
                                   list(rec.affected))
        vid = _resolve_target(state, step.target, "vertex")
        out, rec = op_move(state, vid, d, eps)
        return out, StepRecord(op, vid, rec.distance, list(rec.affected))

    if op == "detach":
        m = _require_mesh(state, op)
        eid = _resolve_target(m, step.target, "edge")
        off = _step_displacement(params, rng)
        face = params.get("face")
        if face is None and "face_near" in params:
            face = _resolve_target(m, {"face_near": params["face_near"]}, "face")
        out = op_detach(m, eid, off, float(params["eps"]), face)
        return out, StepRecord(op, eid, float(np.linalg.norm(off)), [eid])

    if op == "intersect_move":
        d = _step_displacement(params, rng)
        eps = float(params["eps"])
        dup = bool(params.get("duplicate", False))
        fid = _resolve_target(state, step.target, "face")
        out, rec = op_intersect_move(state, fid, d, eps, duplicate=dup)
        return out, StepRecord(op, fid, 0.0, [rec.moved_face, rec.new_pair_count])

    raise ValueError(f"unknown operator {op!r}")
