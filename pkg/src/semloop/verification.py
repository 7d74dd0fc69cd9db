"""Node matching, outlier pruning, coarse pose and loop acceptance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .descriptor import cosine_similarity, realign_background
from .geometry import PoseSE3, procrustes, procrustes_batch

SENTINEL = 1e8
COLLINEAR_TOL = 1e-6


class InsufficientMatchesError(ValueError):
    pass


@dataclass
class MatchSet:
    """One-to-one (query node, target node) index pairs."""

    pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)

    def __len__(self):
        return len(self.pairs)

    @property
    def count(self):
        return len(self.pairs)

    @property
    def query(self):
        return self.pairs[:, 0]

    @property
    def target(self):
        return self.pairs[:, 1]

    def subset(self, mask) -> "MatchSet":
        return MatchSet(self.pairs[mask])


@dataclass
class VerificationResult:
    accepted: bool
    T_coarse: PoseSE3 = field(default_factory=PoseSE3.identity)
    S_graph: float = 0.0
    S_background: float = 0.0
    inliers: MatchSet = field(default_factory=MatchSet)
    matches: MatchSet = field(default_factory=MatchSet)
    pruned: MatchSet = field(default_factory=MatchSet)
    reason: str = ""

    @property
    def u(self) -> int:
        return len(self.inliers)


def box_compatible(boxes_q, boxes_t, tolerance: float) -> np.ndarray:
    """(N, M) mask: largest per-axis relative size difference within ``tolerance``."""
    bq = np.asarray(boxes_q, dtype=float)[:, None, :]
    bt = np.asarray(boxes_t, dtype=float)[None, :, :]
    scale = np.maximum(bq, bt)
    diff = np.abs(bq - bt)
    rel = np.divide(diff, scale, out=np.zeros(np.broadcast_shapes(bq.shape, bt.shape)),
                    where=scale > 1e-12)
    return rel.max(axis=-1) <= tolerance


def affinity_matrix(graph_q, graph_t, box_tolerance: float = 0.3) -> np.ndarray:
    """Assignment cost ``1 - cos(f_i, f_j)``, or the sentinel for incompatible nodes."""
    fq, ft = graph_q.descriptors, graph_t.descriptors
    n, m = graph_q.n_nodes, graph_t.n_nodes
    if n == 0 or m == 0:
        return np.full((n, m), SENTINEL)
    nq = np.linalg.norm(fq, axis=1)
    nt = np.linalg.norm(ft, axis=1)
    denom = np.outer(nq, nt)
    cos = np.divide(fq @ ft.T, denom, out=np.zeros((n, m)), where=denom > 0)
    cost = 1.0 - cos
    ok = (graph_q.labels[:, None] == graph_t.labels[None, :]) & \
        box_compatible(graph_q.boxes, graph_t.boxes, box_tolerance)
    return np.where(ok, cost, SENTINEL)


def match_nodes(cost) -> MatchSet:
    """Minimum-cost assignment; sentinel-cost pairs are dropped afterwards."""
    cost = np.asarray(cost, dtype=float)
    if cost.size == 0:
        return MatchSet()
    rows, cols = linear_sum_assignment(cost)
    keep = cost[rows, cols] < SENTINEL
    return MatchSet(np.stack([rows[keep], cols[keep]], axis=1))


def prune_matches(centers_q, centers_t, matches: MatchSet, neighbor_radius: float = 20.0,
                  tolerance: float = 0.5, min_triangles: int = 1) -> MatchSet:
    """Keep a pair when enough local triangles agree on both sides.

    Triangles are formed by a matched node and two of its matched neighbours
    within ``neighbor_radius`` on the query side. A pair with fewer than two
    such neighbours is kept since there is nothing to check it against.
    """
    o = len(matches)
    if o < 3:
        return matches
    pq = np.asarray(centers_q, dtype=float)[matches.query]
    pt = np.asarray(centers_t, dtype=float)[matches.target]
    dq = np.linalg.norm(pq[:, None] - pq[None], axis=-1)
    dt = np.linalg.norm(pt[:, None] - pt[None], axis=-1)
    agree = np.abs(dq - dt) <= tolerance
    near = dq <= neighbor_radius
    np.fill_diagonal(near, False)
    keep = np.ones(o, dtype=bool)
    for i in range(o):
        nb = np.flatnonzero(near[i])
        if len(nb) < 2:
            continue
        spoke = agree[i, nb]
        tri = np.outer(spoke, spoke) & agree[np.ix_(nb, nb)]
        keep[i] = np.triu(tri, 1).sum() >= min_triangles
    return matches.subset(keep)


def _sample_triples(rng, o, iterations):
    return np.argsort(rng.random((iterations, o)), axis=1)[:, :3]


def ransac_svd(matches: MatchSet, centers_q, centers_t, iterations: int = 1000,
               threshold: float = 0.5, rng=None):
    """Robust rigid fit mapping target centres onto query centres.

    Returns ``(T_coarse, inlier MatchSet)``; the best model is refit on all of
    its inliers.
    """
    o = len(matches)
    if o < 3:
        raise InsufficientMatchesError(f"need at least 3 matches, got {o}")
    rng = np.random.default_rng(rng)
    pq = np.asarray(centers_q, dtype=float)[matches.query]
    pt = np.asarray(centers_t, dtype=float)[matches.target]

    idx = _sample_triples(rng, o, iterations)
    sq, st = pq[idx], pt[idx]
    area_t = np.linalg.norm(np.cross(st[:, 1] - st[:, 0], st[:, 2] - st[:, 0]), axis=1)
    area_q = np.linalg.norm(np.cross(sq[:, 1] - sq[:, 0], sq[:, 2] - sq[:, 0]), axis=1)
    valid = (area_t > COLLINEAR_TOL) & (area_q > COLLINEAR_TOL)
    if not valid.any():
        raise InsufficientMatchesError("every sampled triple is collinear")
    R, t = procrustes_batch(st[valid], sq[valid])
    resid = np.linalg.norm(np.einsum("bij,nj->bni", R, pt) + t[:, None] - pq[None], axis=-1)
    inl = resid <= threshold
    counts = inl.sum(axis=1)
    cost = np.where(inl, resid, 0.0).sum(axis=1)
    best = np.lexsort((cost, -counts))[0]
    mask = inl[best]
    if mask.sum() >= 3:
        T = procrustes(pt[mask], pq[mask])
    else:
        T = PoseSE3(R[best], t[best])
    return T, matches.subset(mask)


def graph_similarity(points_q, points_t, T: PoseSE3) -> float:
    """``exp(-mean ||T p_t - p_q||)`` over inlier centre pairs."""
    points_q = np.asarray(points_q, dtype=float).reshape(-1, 3)
    if len(points_q) == 0:
        raise ValueError("graph_similarity needs at least one inlier")
    resid = np.linalg.norm(T.apply(points_t) - points_q, axis=1)
    return float(np.exp(-resid.mean()))


def verify(query, candidate, config, background_ids, rng=None) -> VerificationResult:
    """Decide whether ``candidate`` closes a loop with ``query``.

    Both arguments are :class:`~semloop.features.ScanFeatures`.
    """
    gq, gt = query.graph, candidate.graph
    cost = affinity_matrix(gq, gt, config.box_tolerance)
    matches = match_nodes(cost)
    if len(matches) < 3:
        return VerificationResult(False, matches=matches, reason=f"insufficient matches ({len(matches)})")
    pruned = prune_matches(gq.centers, gt.centers, matches, config.neighbor_radius,
                           config.triangle_tolerance, config.min_triangles)
    if len(pruned) < 3:
        return VerificationResult(False, matches=matches, pruned=pruned,
                                  reason=f"insufficient matches after pruning ({len(pruned)})")
    try:
        T, inliers = ransac_svd(pruned, gq.centers, gt.centers, config.ransac_iterations,
                                config.inlier_threshold, rng)
    except InsufficientMatchesError as exc:
        return VerificationResult(False, matches=matches, pruned=pruned, reason=str(exc))

    if len(inliers):
        s_graph = graph_similarity(gq.centers[inliers.query], gt.centers[inliers.target], T)
    else:
        s_graph = 0.0
    aligned = realign_background(candidate.background_points, candidate.background_labels, T, background_ids, config.rings,
                                 config.sectors, config.max_range)
    s_bg = cosine_similarity(query.bev.grid, aligned.grid)

    reasons = []
    if len(inliers) < 3:
        reasons.append(f"only {len(inliers)} inliers")
    if s_graph < config.theta_graph:
        reasons.append(f"graph similarity {s_graph:.3f} < {config.theta_graph}")
    if s_bg < config.theta_bg:
        reasons.append(f"background similarity {s_bg:.3f} < {config.theta_bg}")
    return VerificationResult(not reasons, T, s_graph, s_bg, inliers, matches, pruned,
                              "; ".join(reasons))
