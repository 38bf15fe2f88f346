"""Low-level triangle geometry kernels shared by the whole pipeline.

Everything here is plain numpy.  Triangles are passed around as arrays of
shape (m, 3, 3): m triangles, 3 corners, xyz.  All tests are tolerance-based
(no exact arithmetic); callers that need robustness against grazing hits get
a ``degenerate`` flag back and are expected to retry with a perturbed query.
"""

from __future__ import annotations

import numpy as np

_BOX_AXES = np.eye(3)


def tris_boxes_overlap(tris: np.ndarray, centers: np.ndarray, half, tol: float = 0.0) -> np.ndarray:
    """Separating-axis overlap test for (triangle, box) pairs.

    ``tris`` is (m,3,3), ``centers`` is (m,3) -- one box per triangle row --
    and ``half`` the common half-extent vector (3,).  ``tol`` widens the
    boxes so touching contacts count as overlapping (ties classify as
    overlap).  Returns a boolean mask of length m.
    """
    tris = np.asarray(tris, dtype=float)
    if tris.size == 0:
        return np.zeros(0, dtype=bool)
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    half = np.asarray(half, dtype=float).reshape(3) + tol

    v = tris - centers[:, None, :]  # (m,3,3)
    alive = np.ones(len(tris), dtype=bool)

    # Box face normals: interval of triangle along each coordinate axis.
    lo = v.min(axis=1)
    hi = v.max(axis=1)
    alive &= np.all((lo <= half) & (hi >= -half), axis=1)

    e = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 1], v[:, 0] - v[:, 2]], axis=1)

    # Triangle plane.
    n = np.cross(e[:, 0], e[:, 1])
    dist = np.einsum("mi,mi->m", n, v[:, 0])
    r = np.abs(n) @ half
    alive &= np.abs(dist) <= r

    # Nine cross-product axes a = e_i x box_axis_j, written out per axis to
    # keep everything vectorized over the pair batch.
    for j in range(3):
        axes = np.cross(e, _BOX_AXES[j][None, None, :])  # (m,3,3)
        p = np.einsum("mki,mci->mkc", axes, v)  # projections of the 3 corners
        rr = np.abs(axes) @ half  # (m,3)
        pmin = p.min(axis=2)
        pmax = p.max(axis=2)
        alive &= np.all((pmin <= rr) & (pmax >= -rr), axis=1)

    return alive


def tris_box_overlap(tris: np.ndarray, center, half, tol: float = 0.0) -> np.ndarray:
    """Overlap test of many triangles against one box; mask of length m."""
    tris = np.asarray(tris, dtype=float)
    if tris.size == 0:
        return np.zeros(0, dtype=bool)
    centers = np.broadcast_to(np.asarray(center, dtype=float), (len(tris), 3))
    return tris_boxes_overlap(tris, centers, half, tol)


def segment_crossings(p, q, tris: np.ndarray,
                      par_tol: float = 1e-12,
                      bary_tol: float = 1e-10):
    """Count proper crossings of the open segment p->q with a triangle batch.

    A hit is degenerate when the segment grazes a triangle edge/vertex, runs
    nearly parallel inside the triangle plane, or starts/ends on the surface;
    such rays must be re-cast rather than trusted.

    Returns ``(crossings, degenerate)``.
    """
    tris = np.asarray(tris, dtype=float)
    if tris.size == 0:
        return 0, False
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    d = q - p

    e1 = tris[:, 1] - tris[:, 0]
    e2 = tris[:, 2] - tris[:, 0]
    h = np.cross(d[None, :], e2)
    det = np.einsum("mi,mi->m", e1, h)
    scale = (np.linalg.norm(d) * np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)) + 1e-300
    parallel = np.abs(det) <= par_tol * scale

    degenerate = False
    if parallel.any():
        # Parallel triangles only matter when the segment grazes their plane.
        n = np.cross(e1[parallel], e2[parallel])
        nn = np.linalg.norm(n, axis=1) + 1e-300
        dp = np.abs(np.einsum("mi,i->m", n, p) - np.einsum("mi,mi->m", n, tris[parallel, 0])) / nn
        dq = np.abs(np.einsum("mi,i->m", n, q) - np.einsum("mi,mi->m", n, tris[parallel, 0])) / nn
        near = np.minimum(dp, dq) <= 1e-9 * (np.linalg.norm(d) + 1.0)
        if near.any():
            # Check the graze actually happens over the triangle's footprint.
            sub = tris[parallel][near]
            seg_lo = np.minimum(p, q)
            seg_hi = np.maximum(p, q)
            overlaps = np.all((sub.min(axis=1) <= seg_hi + 1e-12) & (sub.max(axis=1) >= seg_lo - 1e-12), axis=1)
            if overlaps.any():
                degenerate = True

    keep = ~parallel
    if not keep.any():
        return 0, degenerate

    inv = np.zeros_like(det)
    inv[keep] = 1.0 / det[keep]
    s = p[None, :] - tris[:, 0]
    u = np.einsum("mi,mi->m", s, h) * inv
    qv = np.cross(s, e1)
    v = np.einsum("i,mi->m", d, qv) * inv
    t = np.einsum("mi,mi->m", e2, qv) * inv
    w = 1.0 - u - v

    inside = keep & (u > bary_tol) & (v > bary_tol) & (w > bary_tol)
    on_span = (t > bary_tol) & (t < 1.0 - bary_tol)
    hits = inside & on_span

    near_edge = keep & (t > -bary_tol) & (t < 1.0 + bary_tol) & \
        (u > -bary_tol) & (v > -bary_tol) & (w > -bary_tol) & \
        ((np.abs(u) <= bary_tol) | (np.abs(v) <= bary_tol) | (np.abs(w) <= bary_tol) |
         (np.abs(t) <= bary_tol) | (np.abs(t - 1.0) <= bary_tol))
    if near_edge.any():
        degenerate = True

    return int(hits.sum()), degenerate


def segments_crossings(p, targets: np.ndarray, tris: np.ndarray,
                       par_tol: float = 1e-12, bary_tol: float = 1e-10):
    """Vectorized ``segment_crossings`` for several targets sharing a source.

    Returns arrays ``(crossings (r,), degenerate (r,))``.
    """
    targets = np.asarray(targets, dtype=float).reshape(-1, 3)
    r = len(targets)
    counts = np.zeros(r, dtype=int)
    degen = np.zeros(r, dtype=bool)
    tris = np.asarray(tris, dtype=float)
    if tris.size == 0:
        return counts, degen
    p = np.asarray(p, dtype=float)
    d = targets - p[None, :]  # (r,3)

    e1 = tris[:, 1] - tris[:, 0]  # (m,3)
    e2 = tris[:, 2] - tris[:, 0]
    h = np.cross(d[:, None, :], e2[None, :, :])  # (r,m,3)
    det = np.einsum("mi,rmi->rm", e1, h)
    scale = (np.linalg.norm(d, axis=1)[:, None] *
             (np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1))[None, :]) + 1e-300
    parallel = np.abs(det) <= par_tol * scale

    if parallel.any():
        n = np.cross(e1, e2)
        nn = np.linalg.norm(n, axis=1) + 1e-300
        dp = np.abs((n @ p) - np.einsum("mi,mi->m", n, tris[:, 0])) / nn  # (m,)
        dq = np.abs(np.einsum("mi,ri->rm", n, targets) -
                    np.einsum("mi,mi->m", n, tris[:, 0])[None, :]) / nn[None, :]
        seg_len = np.linalg.norm(d, axis=1)[:, None]
        near = np.minimum(dp[None, :], dq) <= 1e-9 * (seg_len + 1.0)
        graze = parallel & near
        if graze.any():
            degen |= graze.any(axis=1)

    keep = ~parallel
    inv = np.where(keep, 1.0 / np.where(keep, det, 1.0), 0.0)
    s = p[None, :] - tris[:, 0]  # (m,3)
    u = np.einsum("mi,rmi->rm", s, h) * inv
    qv = np.cross(s, e1)  # (m,3)
    v = np.einsum("ri,mi->rm", d, qv) * inv
    t = np.einsum("mi,mi->m", e2, qv)[None, :] * inv
    w = 1.0 - u - v

    inside = keep & (u > bary_tol) & (v > bary_tol) & (w > bary_tol)
    on_span = (t > bary_tol) & (t < 1.0 - bary_tol)
    counts = (inside & on_span).sum(axis=1).astype(int)

    near_edge = keep & (t > -bary_tol) & (t < 1.0 + bary_tol) & \
        (u > -bary_tol) & (v > -bary_tol) & (w > -bary_tol) & \
        ((np.abs(u) <= bary_tol) | (np.abs(v) <= bary_tol) | (np.abs(w) <= bary_tol) |
         (np.abs(t) <= bary_tol) | (np.abs(t - 1.0) <= bary_tol))
    degen |= near_edge.any(axis=1)
    return counts, degen


def _interval_on_line(tri, n_other, d_other, tol):
    """Parameter interval of tri's intersection with the other plane's line.

    Helper for the Moller triangle-triangle test: returns the interval of
    the intersection segment projected on the line direction, or None.
    """
    dist = tri @ n_other + d_other
    s = np.sign(np.where(np.abs(dist) <= tol, 0.0, dist))
    if (s >= 0).all() and (s > 0).any():
        return None
    if (s <= 0).all() and (s < 0).any():
        return None
    return dist, s


def tri_tri_intersect(t1: np.ndarray, t2: np.ndarray, tol: float = 1e-12) -> bool:
    """True when the interiors of two triangles intersect or overlap.

    Contacts confined to triangle boundaries (a shared edge between
    neighboring facets, a vertex touch, an edge lying inside the other's
    boundary) do not count; a positive-area coplanar overlap and any
    transversal piercing do.
    """
    t1 = np.asarray(t1, dtype=float)
    t2 = np.asarray(t2, dtype=float)
    scale = max(np.abs(t1).max(), np.abs(t2).max(), 1.0)
    tol = tol * scale

    n1 = np.cross(t1[1] - t1[0], t1[2] - t1[0])
    n2 = np.cross(t2[1] - t2[0], t2[2] - t2[0])
    if np.linalg.norm(n1) < tol * tol or np.linalg.norm(n2) < tol * tol:
        return False  # degenerate sliver: no interior to speak of

    d2 = t1 @ (n2 / np.linalg.norm(n2)) - np.dot(t2[0], n2 / np.linalg.norm(n2))
    d1 = t2 @ (n1 / np.linalg.norm(n1)) - np.dot(t1[0], n1 / np.linalg.norm(n1))

    coplanar = np.all(np.abs(d2) <= 1e-9 * scale)
    if coplanar:
        return _coplanar_overlap(t1, t2, n1, tol)

    if (d2 > tol).all() or (d2 < -tol).all():
        return False
    if (d1 > tol).all() or (d1 < -tol).all():
        return False

    line = np.cross(n1, n2)
    axis = np.argmax(np.abs(line))

    i1 = _cross_interval(t1, d2, axis, tol)
    i2 = _cross_interval(t2, d1, axis, tol)
    if i1 is None or i2 is None:
        return False
    lo = max(i1[0], i2[0])
    hi = min(i1[1], i2[1])
    if hi - lo <= 1e-9 * scale:
        return False
    # Exclude contacts where the intersection line runs along an edge of
    # either triangle: that contact lies on the boundary, not the interior.
    for tri in (t1, t2):
        for a in range(3):
            e = tri[(a + 1) % 3] - tri[a]
            if np.linalg.norm(np.cross(e, line)) <= 1e-9 * scale * np.linalg.norm(line):
                m = tri[a] + 0.5 * e
                other = t2 if tri is t1 else t1
                nn = n2 if tri is t1 else n1
                dd = np.dot(m - other[0], nn / np.linalg.norm(nn))
                if abs(dd) <= 1e-9 * scale:
                    return False
    return True


def _cross_interval(tri, dist, axis, tol):
    """Projection interval on the intersection line for one triangle."""
    pts = []
    for a in range(3):
        b = (a + 1) % 3
        da, db = dist[a], dist[b]
        if (da > tol and db > tol) or (da < -tol and db < -tol):
            continue
        if abs(da - db) < 1e-300:
            pts.extend([tri[a][axis], tri[b][axis]])
            continue
        s = da / (da - db)
        if -1e-9 <= s <= 1.0 + 1e-9:
            p = tri[a] + np.clip(s, 0.0, 1.0) * (tri[b] - tri[a])
            pts.append(p[axis])
    if len(pts) < 2:
        return None
    return min(pts), max(pts)


def _coplanar_overlap(t1, t2, n, tol):
    """Positive-area overlap of two coplanar triangles (2D clip area)."""
    axis = np.argmax(np.abs(n))
    keep = [i for i in range(3) if i != axis]
    a = t1[:, keep]
    b = t2[:, keep]
    if _poly_area(a) < 0:
        a = a[::-1]
    if _poly_area(b) < 0:
        b = b[::-1]
    poly = _clip_poly(a, b)
    if len(poly) < 3:
        return False
    area = abs(_poly_area(np.asarray(poly)))
    ref = max(abs(_poly_area(a)), abs(_poly_area(b)), tol)
    return area > 1e-9 * ref


def _poly_area(pts):
    x = np.asarray(pts)[:, 0]
    y = np.asarray(pts)[:, 1]
    return 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)


def _clip_poly(subject, clip):
    """Sutherland-Hodgman clip of convex 2D polygons (ccw)."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        a = clip[i]
        b = clip[(i + 1) % n]
        inp = out
        out = []
        if not inp:
            break
        for j in range(len(inp)):
            cur = np.asarray(inp[j])
            prv = np.asarray(inp[j - 1])
            cur_in = _left_of(a, b, cur)
            prv_in = _left_of(a, b, prv)
            if cur_in:
                if not prv_in:
                    out.append(tuple(_seg_line_hit(prv, cur, a, b)))
                out.append(tuple(cur))
            elif prv_in:
                out.append(tuple(_seg_line_hit(prv, cur, a, b)))
    return out


def _left_of(a, b, p):
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0


def _seg_line_hit(p, q, a, b):
    d1 = q - p
    d2 = np.asarray(b) - np.asarray(a)
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    if abs(denom) < 1e-300:
        return p
    t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom
    return p + t * d1


def points_tris_distance(points: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Distance from each point to the nearest of the given triangles.

    Closest-point-on-triangle evaluated for the full (points x tris)
    product; fine for the modest sizes the flaw ledger needs.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tris = np.asarray(tris, dtype=float)
    if tris.size == 0:
        return np.full(len(points), np.inf)
    out = np.empty(len(points))
    for i, p in enumerate(points):
        out[i] = np.sqrt(_point_tris_sqdist(p, tris).min())
    return out


def _point_tris_sqdist(p, tris):
    a = tris[:, 0]
    b = tris[:, 1]
    c = tris[:, 2]
    ab = b - a
    ac = c - a
    ap = p[None, :] - a

    d1 = np.einsum("mi,mi->m", ab, ap)
    d2 = np.einsum("mi,mi->m", ac, ap)
    bp = p[None, :] - b
    d3 = np.einsum("mi,mi->m", ab, bp)
    d4 = np.einsum("mi,mi->m", ac, bp)
    cp = p[None, :] - c
    d5 = np.einsum("mi,mi->m", ab, cp)
    d6 = np.einsum("mi,mi->m", ac, cp)

    closest = np.empty_like(tris[:, 0])

    cond_a = (d1 <= 0) & (d2 <= 0)
    closest[cond_a] = a[cond_a]

    cond_b = (d3 >= 0) & (d4 <= d3)
    closest[cond_b & ~cond_a] = b[cond_b & ~cond_a]
    done = cond_a | cond_b

    vc = d1 * d4 - d3 * d2
    cond_ab = (~done) & (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    if cond_ab.any():
        v = d1[cond_ab] / (d1[cond_ab] - d3[cond_ab])
        closest[cond_ab] = a[cond_ab] + v[:, None] * ab[cond_ab]
    done |= cond_ab

    cond_c = (~done) & (d6 >= 0) & (d5 <= d6)
    closest[cond_c] = c[cond_c]
    done |= cond_c

    vb = d5 * d2 - d1 * d6
    cond_ac = (~done) & (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    if cond_ac.any():
        w = d2[cond_ac] / (d2[cond_ac] - d6[cond_ac])
        closest[cond_ac] = a[cond_ac] + w[:, None] * ac[cond_ac]
    done |= cond_ac

    va = d3 * d6 - d5 * d4
    cond_bc = (~done) & (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    if cond_bc.any():
        w = (d4[cond_bc] - d3[cond_bc]) / ((d4[cond_bc] - d3[cond_bc]) + (d5[cond_bc] - d6[cond_bc]))
        closest[cond_bc] = b[cond_bc] + w[:, None] * (c[cond_bc] - b[cond_bc])
    done |= cond_bc

    rest = ~done
    if rest.any():
        denom = (va[rest] + vb[rest] + vc[rest])
        denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
        v = vb[rest] / denom
        w = vc[rest] / denom
        closest[rest] = a[rest] + v[:, None] * ab[rest] + w[:, None] * ac[rest]

    diff = closest - p[None, :]
    return np.einsum("mi,mi->m", diff, diff)


class Bvh:
    """Axis-aligned bounding-volume hierarchy over a triangle soup.

    Median-split construction, array-backed nodes, iterative box queries.
    """

    def __init__(self, tris: np.ndarray, leaf_size: int = 8):
        tris = np.asarray(tris, dtype=float)
        self.tris = tris
        n = len(tris)
        if n == 0:
            self._nodes = []
            self._order = np.zeros(0, dtype=int)
            self._tri_lo = np.zeros((0, 3))
            self._tri_hi = np.zeros((0, 3))
            return
        lo = tris.min(axis=1)
        hi = tris.max(axis=1)
        self._tri_lo = lo
        self._tri_hi = hi
        cent = 0.5 * (lo + hi)
        order = np.arange(n)
        nodes = []  # (lo, hi, left, right, start, count); leaf when left < 0

        def build(idx):
            node_id = len(nodes)
            nodes.append(None)
            blo = lo[idx].min(axis=0)
            bhi = hi[idx].max(axis=0)
            if len(idx) <= leaf_size:
                start = build.cursor
                self._order[start:start + len(idx)] = idx
                build.cursor += len(idx)
                nodes[node_id] = (blo, bhi, -1, -1, start, len(idx))
                return node_id
            axis = np.argmax(bhi - blo)
            med = np.argsort(cent[idx, axis], kind="stable")
            half = len(idx) // 2
            left = build(idx[med[:half]])
            right = build(idx[med[half:]])
            nodes[node_id] = (blo, bhi, left, right, 0, 0)
            return node_id

        self._order = np.zeros(n, dtype=int)
        build.cursor = 0
        build(order)
        self._nodes = nodes

    def query_box(self, lo, hi) -> np.ndarray:
        """Indices of triangles whose bounding boxes intersect [lo, hi]."""
        if not self._nodes:
            return np.zeros(0, dtype=int)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        out = []
        stack = [0]
        while stack:
            blo, bhi, left, right, start, count = self._nodes[stack.pop()]
            if (blo > hi).any() or (bhi < lo).any():
                continue
            if left < 0:
                out.append(self._order[start:start + count])
            else:
                stack.append(left)
                stack.append(right)
        if not out:
            return np.zeros(0, dtype=int)
        cand = np.concatenate(out)
        mask = np.all((self._tri_lo[cand] <= hi) & (self._tri_hi[cand] >= lo), axis=1)
        return cand[mask]

    def query_segment(self, p, q, pad: float = 0.0) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        return self.query_box(np.minimum(p, q) - pad, np.maximum(p, q) + pad)
