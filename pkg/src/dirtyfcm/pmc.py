"""Two-stage point membership classification for dirty models.

Stage 1 is the filled space tree: a point in a labeled leaf inherits that
label with no geometry queries at all.  Stage 2 handles points in cut
leaves by casting short segments to the centers of all neighboring labeled
leaves and counting boundary crossings; each segment votes for the label
implied by its target's certified state and the crossing parity, and the
point takes the majority.

Multiple directions matter because defects lie: a single ray through a gap
or a doubled facet flips its parity, but rays in other directions still
report the truth.  A unanimous vote is trustworthy; a split vote marks the
point as ambiguous, and the bracketing policies force all ambiguous points
inside (upper bound) or outside (lower bound) to bound the induced error.

Grazing hits are not trusted: a segment that clips a triangle edge or
vertex within tolerance is retried toward a deterministically jittered
target, and excluded from the vote when retries run out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .intersect import Bvh, segment_crossings, segments_crossings
from .mesh_io import TriangleSoup
from .spacetree import FilledSpaceTree, LeafState

INSIDE = LeafState.INSIDE
OUTSIDE = LeafState.OUTSIDE

MAJORITY = "majority"
BRACKET_INSIDE = "bracket_inside"
BRACKET_OUTSIDE = "bracket_outside"

_JITTER_DIRS = np.eye(3)


@dataclass(frozen=True)
class VotePolicy:
    """How a vote record turns into a label.

    ``majority`` follows the larger count with ``tie_rule`` breaking ties;
    the bracket modes force every non-unanimous point to one side, bounding
    the material volume from above (inside) or below (outside).
    """

    mode: str = MAJORITY
    tie_rule: str = "inside"

    def __post_init__(self):
        if self.mode not in (MAJORITY, BRACKET_INSIDE, BRACKET_OUTSIDE):
            raise ValueError(f"unknown vote mode {self.mode!r}")
        if self.tie_rule not in ("inside", "outside"):
            raise ValueError(f"unknown tie rule {self.tie_rule!r}")


MAJORITY_POLICY = VotePolicy(MAJORITY)
BRACKET_INSIDE_POLICY = VotePolicy(BRACKET_INSIDE)
BRACKET_OUTSIDE_POLICY = VotePolicy(BRACKET_OUTSIDE)

POLICIES = {
    "majority": MAJORITY_POLICY,
    "bracket-in": BRACKET_INSIDE_POLICY,
    "bracket-out": BRACKET_OUTSIDE_POLICY,
}


@dataclass
class VoteRecord:
    point: np.ndarray
    votes_inside: int
    votes_outside: int
    n_rays: int
    unanimous: bool
    tie: bool
    label: LeafState
    degenerate_ray_count: int
    fallback: bool = False


class BatchClassification:
    """Compact vote ledger for a batch of points.

    Stores per-point vote counts in arrays; labels under any policy are
    derived on demand, so one classification pass serves a majority run and
    both bracket runs.  Batches merge commutatively via :meth:`extend`.
    """

    def __init__(self):
        self.points = np.zeros((0, 3))
        self.votes_in = np.zeros(0, dtype=np.int32)
        self.votes_out = np.zeros(0, dtype=np.int32)
        self.n_rays = np.zeros(0, dtype=np.int32)
        self.degenerate = np.zeros(0, dtype=np.int32)
        self.stage1 = np.zeros(0, dtype=np.int8)    # 1 inside, 0 outside, -1 cut
        self.fallback = np.zeros(0, dtype=bool)

    def __len__(self):
        return len(self.votes_in)

    @property
    def cut_mask(self):
        return self.stage1 < 0

    @property
    def unanimous(self):
        surviving = self.votes_in + self.votes_out
        split = (self.votes_in > 0) & (self.votes_out > 0)
        return ~self.cut_mask | ((surviving > 0) & ~split)

    @property
    def tie(self):
        return self.cut_mask & (self.votes_in == self.votes_out)

    @property
    def ambiguous(self):
        return self.cut_mask & ~self.unanimous

    def labels(self, policy: VotePolicy) -> np.ndarray:
        """Boolean inside-labels for every point under the given policy."""
        inside = self.stage1 == 1
        cut = self.cut_mask
        vin = self.votes_in
        vout = self.votes_out
        maj = np.where(vin > vout, True, np.where(vout > vin, False,
                                                  policy.tie_rule == "inside"))
        if policy.mode == MAJORITY:
            inside = np.where(cut, maj, inside)
        elif policy.mode == BRACKET_INSIDE:
            inside = np.where(cut, np.where(self.unanimous, maj, True), inside)
        else:
            inside = np.where(cut, np.where(self.unanimous, maj, False), inside)
        return inside.astype(bool)

    def record(self, i: int, policy: VotePolicy = MAJORITY_POLICY) -> VoteRecord:
        label = INSIDE if self.labels(policy)[i] else OUTSIDE
        return VoteRecord(
            point=self.points[i].copy(),
            votes_inside=int(self.votes_in[i]),
            votes_outside=int(self.votes_out[i]),
            n_rays=int(self.n_rays[i]),
            unanimous=bool(self.unanimous[i]),
            tie=bool(self.tie[i]),
            label=label,
            degenerate_ray_count=int(self.degenerate[i]),
            fallback=bool(self.fallback[i]),
        )

    def extend(self, other: "BatchClassification"):
        for name in ("points", "votes_in", "votes_out", "n_rays",
                     "degenerate", "stage1", "fallback"):
            setattr(self, name, np.concatenate([getattr(self, name), getattr(other, name)]))
        return self

    def _alloc(self, n):
        self.points = np.zeros((n, 3))
        self.votes_in = np.zeros(n, dtype=np.int32)
        self.votes_out = np.zeros(n, dtype=np.int32)
        self.n_rays = np.zeros(n, dtype=np.int32)
        self.degenerate = np.zeros(n, dtype=np.int32)
        self.stage1 = np.zeros(n, dtype=np.int8)
        self.fallback = np.zeros(n, dtype=bool)


def ambiguity_stats(batch: BatchClassification) -> dict:
    """Point counts and percentages (0.1% resolution) for a vote ledger.

    The typical ray count per cut-cell point is reported as a diagnostic;
    it depends on the adjacency scheme and the local shell thickness.
    """
    total = len(batch)
    cut = int(batch.cut_mask.sum())
    amb = int(batch.ambiguous.sum())
    ties = int(batch.tie.sum())

    def pct(x):
        return round(100.0 * x / total, 1) if total else 0.0

    rays = batch.n_rays[batch.cut_mask]
    return {
        "total_points": total,
        "cut_cell_points": cut,
        "ambiguous_points": amb,
        "tie_points": ties,
        "cut_cell_pct": pct(cut),
        "ambiguous_pct": pct(amb),
        "tie_pct": pct(ties),
        "median_rays_per_cut_point": float(np.median(rays)) if len(rays) else 0.0,
    }


class PmcEngine:
    """Read-only classifier: filled tree + triangle index + vote policy."""

    def __init__(self, filled: FilledSpaceTree, soup: TriangleSoup,
                 retry_limit: int = 3, policy: VotePolicy = MAJORITY_POLICY):
        self.tree = filled
        self.soup = soup
        self.bvh = Bvh(soup.corners)
        self.retry_limit = retry_limit
        self.policy = policy
        self._target_cache = {}

    @property
    def domain(self):
        return self.tree.domain

    # -- single point ---------------------------------------------------------

    def classify(self, point, policy: VotePolicy = None):
        """Label one point; returns ``(label, VoteRecord)``."""
        batch = self.classify_batch(np.asarray(point, dtype=float).reshape(1, 3))
        rec = batch.record(0, policy if policy is not None else self.policy)
        return rec.label, rec

    # -- batched --------------------------------------------------------------

    def classify_batch(self, points) -> BatchClassification:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        out = BatchClassification()
        out._alloc(len(points))
        out.points = points.copy()

        by_leaf = {}
        for i, p in enumerate(points):
            key = self.tree.leaf_at(p)
            state = self.tree.state_of(key)
            if state == LeafState.INSIDE:
                out.stage1[i] = 1
            elif state == LeafState.OUTSIDE:
                out.stage1[i] = 0
            else:
                out.stage1[i] = -1
                by_leaf.setdefault(key, []).append(i)

        for key in sorted(by_leaf):
            self._classify_leaf(key, by_leaf[key], points, out)
        return out

    def _leaf_targets(self, key):
        cached = self._target_cache.get(key)
        if cached is not None:
            return cached
        targets = self.tree.noncut_neighbor_targets(key)
        if targets:
            mids = np.stack([t[0] for t in targets])
            labels = np.array([t[1] == INSIDE for t in targets], dtype=bool)
            fallback = False
        else:
            # Isolated cut leaf, e.g. deep inside a defect cluster: one long
            # segment to the domain corner, whose membership is certain.
            mids = self.domain.min[None, :].copy()
            labels = np.array([False])
            fallback = True
        box = self.tree.leaf_box(key)
        lo = np.minimum(box.min, mids.min(axis=0))
        hi = np.maximum(box.max, mids.max(axis=0))
        pad = 1e-9 * self.domain.diagonal
        cand = np.sort(self.bvh.query_box(lo - pad, hi + pad))
        leaf_edge = float(min(box.extents))
        entry = (mids, labels, fallback, cand, leaf_edge)
        self._target_cache[key] = entry
        return entry

    def _classify_leaf(self, key, idx, points, out: BatchClassification):
        mids, labels, fallback, cand, leaf_edge = self._leaf_targets(key)
        tris = self.soup.corners[cand]
        for i in idx:
            p = points[i]
            counts, degen = segments_crossings(p, mids, tris)
            votes_in = 0
            votes_out = 0
            dropped = 0
            for r in range(len(mids)):
                c = counts[r]
                if degen[r]:
                    c = self._retry(p, mids[r], leaf_edge)
                    if c is None:
                        dropped += 1
                        continue
                vote_inside = bool(labels[r]) == (c % 2 == 0)
                if vote_inside:
                    votes_in += 1
                else:
                    votes_out += 1
            out.votes_in[i] = votes_in
            out.votes_out[i] = votes_out
            out.n_rays[i] = len(mids)
            out.degenerate[i] = dropped
            out.fallback[i] = fallback

    def _retry(self, point, target, leaf_edge):
        """Re-cast toward deterministically jittered targets.

        Attempt k shifts the target by k * 1e-4 * leaf_edge along the k-th
        lattice axis.  Returns the crossing count or None when the retry
        budget is exhausted.
        """
        for attempt in range(1, self.retry_limit + 1):
            shifted = retry_target(target, attempt, leaf_edge)
            cand = self.bvh.query_segment(point, shifted, pad=1e-9 * self.domain.diagonal)
            c, degen = segment_crossings(point, shifted, self.soup.corners[cand])
            if not degen:
                return c
        return None


def retry_target(target, attempt: int, leaf_edge: float) -> np.ndarray:
    """Jittered target for retry ``attempt`` (1-based): shift by
    attempt * 1e-4 * leaf_edge along a fixed per-attempt lattice axis."""
    d = _JITTER_DIRS[(attempt - 1) % 3]
    return np.asarray(target, dtype=float) + attempt * 1e-4 * leaf_edge * d


def cast_segment_parity(point, target, soup_or_tris, bvh: Bvh = None):
    """Crossing count of the open segment with a triangle set.

    Returns ``(crossings, degenerate)``; degenerate hits (edge/vertex
    grazing, surface-touching endpoints) mean the count is untrustworthy.
    """
    tris = soup_or_tris.corners if isinstance(soup_or_tris, TriangleSoup) else np.asarray(soup_or_tris)
    if bvh is not None:
        idx = bvh.query_segment(point, target, pad=1e-12)
        tris = tris[idx]
    return segment_crossings(point, target, tris)


def write_labels_csv(path, batch: BatchClassification, policy: VotePolicy = MAJORITY_POLICY):
    """Per-point CSV: x,y,z,label,votes_in,votes_out,tie."""
    labels = batch.labels(policy)
    ties = batch.tie
    with open(path, "w") as fh:
        fh.write("x,y,z,label,votes_in,votes_out,tie\n")
        for i in range(len(batch)):
            p = batch.points[i]
            fh.write(f"{float(p[0])!r},{float(p[1])!r},{float(p[2])!r},"
                     f"{'inside' if labels[i] else 'outside'},"
                     f"{int(batch.votes_in[i])},{int(batch.votes_out[i])},"
                     f"{int(ties[i])}\n")


def stats_json(batch: BatchClassification) -> str:
    return json.dumps(ambiguity_stats(batch), indent=2)
