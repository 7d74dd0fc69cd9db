"""Dense instance ICP followed by point-to-plane refinement on background."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PoseSE3, exp_so3, pose_delta, procrustes

logger = logging.getLogger(__name__)


@dataclass
class StageReport:
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = False
    degraded: bool = False
    rank_deficient: bool = False
    reverted: bool = False
    correspondences: int = 0
    start_residual: float = float("nan")  # RMS at the incoming pose
    objective: list = field(default_factory=list)  # (before, after) per update
    message: str = ""


@dataclass
class RegistrationReport:
    T_coarse: PoseSE3
    T_icp: PoseSE3
    T_refine: PoseSE3
    icp: StageReport
    plane: StageReport
    stage_residuals: dict = field(default_factory=dict)

    @property
    def degraded(self) -> bool:
        return self.icp.degraded or self.plane.degraded


def voxel_downsample(points, size, labels=None):
    """Centroid per occupied voxel (per voxel and label when labels are given)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return (points, np.zeros(0, dtype=np.int64)) if labels is not None else points
    cells = np.floor(points / size).astype(np.int64)
    cells -= cells.min(axis=0)
    dims = cells.max(axis=0) + 1
    key = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        lab_ids, lab_idx = np.unique(labels, return_inverse=True)
        key = key * len(lab_ids) + lab_idx
    _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    centroids = np.column_stack([np.bincount(inverse, points[:, i], len(counts))
                                 for i in range(3)]) / counts[:, None]
    if labels is None:
        return centroids
    out_labels = np.zeros(len(counts), dtype=np.int64)
    out_labels[inverse] = labels
    return centroids, out_labels


def _sym3_eig(cxx, cxy, cxz, cyy, cyz, czz):
    """Closed-form eigenvalues (descending) and smallest-eigenvalue vector of 3x3 symmetric matrices."""
    n = len(cxx)
    q = (cxx + cyy + czz) / 3.0
    p1 = cxy ** 2 + cxz ** 2 + cyz ** 2
    p2 = (cxx - q) ** 2 + (cyy - q) ** 2 + (czz - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = p > 1e-300
    ps = np.where(safe, p, 1.0)
    bxx, byy, bzz = (cxx - q) / ps, (cyy - q) / ps, (czz - q) / ps
    bxy, bxz, byz = cxy / ps, cxz / ps, cyz / ps
    det = bxx * (byy * bzz - byz ** 2) - bxy * (bxy * bzz - byz * bxz) + bxz * (bxy * byz - byy * bxz)
    phi = np.arccos(np.clip(det / 2.0, -1.0, 1.0)) / 3.0
    l1 = np.where(safe, q + 2.0 * p * np.cos(phi), q)
    l3 = np.where(safe, q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0), q)
    l2 = 3.0 * q - l1 - l3

    r0 = np.column_stack([cxx - l3, cxy, cxz])
    r1 = np.column_stack([cxy, cyy - l3, cyz])
    r2 = np.column_stack([cxz, cyz, czz - l3])
    cands = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], axis=1)
    norms = np.linalg.norm(cands, axis=2)
    best = norms.argmax(axis=1)
    vec = cands[np.arange(n), best]
    length = norms[np.arange(n), best]
    vec = np.divide(vec, length[:, None], out=np.tile([0.0, 0.0, 1.0], (n, 1)),
                    where=length[:, None] > 0)
    return l1, l2, l3, vec


def _pca_normals(points, tree, query_idx, k, sensor_origin):
    n = len(query_idx)
    k = min(k, len(points))
    _, idx = tree.query(points[query_idx], k=k)
    idx = np.asarray(idx).reshape(n, k)
    x, y, z = (np.ascontiguousarray(points[:, i])[idx] for i in range(3))
    x = x - x.mean(axis=1, keepdims=True)
    y = y - y.mean(axis=1, keepdims=True)
    z = z - z.mean(axis=1, keepdims=True)
    l1, l2, l3, normals = _sym3_eig((x * x).sum(1), (x * y).sum(1), (x * z).sum(1),
                                    (y * y).sum(1), (y * z).sum(1), (z * z).sum(1))
    planarity = np.divide(l2 - l3, l1, out=np.zeros(n), where=l1 > 1e-15)
    to_origin = np.asarray(sensor_origin, dtype=float) - points[query_idx]
    flip = np.einsum("ij,ij->i", normals, to_origin) < 0
    normals[flip] *= -1
    return normals, planarity


def estimate_normals(points, neighbors: int = 10, min_planarity: float = 0.4,
                     sensor_origin=(0.0, 0.0, 0.0)):
    """PCA normals over the k nearest neighbours.

    Returns ``(normals, planarity, usable)``; planarity is
    ``(l2 - l3) / l1`` for eigenvalues ``l1 >= l2 >= l3`` and normals point
    toward ``sensor_origin``.
    """
    field = NormalField(points, neighbors, min_planarity, sensor_origin)
    idx = np.arange(len(field.points))
    normals, usable = field.normals(idx)
    return normals, field.planarity[idx], usable


class NormalField:
    """Background cloud with its kd-tree and normals computed on demand.

    Normals are cached, so each point's neighbourhood is analysed at most
    once however many registrations the scan takes part in.
    """

    def __init__(self, points, neighbors=10, min_planarity=0.4, sensor_origin=(0.0, 0.0, 0.0)):
        if neighbors < 3:
            raise ValueError("neighbors must be >= 3")
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.neighbors = neighbors
        self.min_planarity = min_planarity
        self.sensor_origin = sensor_origin
        n = len(self.points)
        self.tree = cKDTree(self.points) if n else None
        self._normals = np.zeros((n, 3))
        self.planarity = np.zeros(n)
        self._done = np.zeros(n, dtype=bool)
        if n < 3:
            self._done[:] = True

    @classmethod
    def precomputed(cls, points, normals, usable=None):
        field = cls(np.zeros((0, 3)))
        field.points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = len(field.points)
        field.tree = cKDTree(field.points) if n else None
        field._normals = np.asarray(normals, dtype=float).reshape(n, 3)
        field.planarity = np.ones(n) if usable is None else np.asarray(usable, dtype=float)
        field.min_planarity = 0.5
        field._done = np.ones(n, dtype=bool)
        return field

    def __len__(self):
        return len(self.points)

    def normals(self, idx):
        """``(normals, usable)`` for the points at ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        todo = np.unique(idx[~self._done[idx]])
        if len(todo):
            nrm, pl = _pca_normals(self.points, self.tree, todo, self.neighbors, self.sensor_origin)
            self._normals[todo] = nrm
            self.planarity[todo] = pl
            self._done[todo] = True
        return self._normals[idx], self.planarity[idx] >= self.min_planarity


def _group_tree(groups, spacing):
    """One kd-tree over several point groups kept apart by a 4th coordinate."""
    pts = np.vstack(groups)
    gid = np.repeat(np.arange(len(groups)), [len(g) for g in groups])
    return cKDTree(np.column_stack([pts, gid * spacing])), pts


class _GroupedPairs:
    """Matched instance groups in one kd-tree, group id as a 4th coordinate."""

    def __init__(self, query_groups, target_groups, cap):
        self.cap = cap
        spacing = 4.0 * cap + 1.0
        self.tree, self.qpts = _group_tree(query_groups, spacing)
        self.tgt = np.vstack(target_groups)
        self.tgid = np.repeat(np.arange(len(target_groups)),
                              [len(g) for g in target_groups]) * spacing

    def match(self, T):
        moved = T.apply(self.tgt)
        dist, nn = self.tree.query(np.column_stack([moved, self.tgid]),
                                   distance_upper_bound=self.cap)
        ok = np.isfinite(dist)
        return moved[ok], self.qpts[nn[ok]]

    def rms(self, T):
        src, dst = self.match(T)
        return _rms(src - dst) if len(src) else float("nan")


def _rms(d):
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def icp_instances(query_groups, target_groups, T_init: PoseSE3, max_iterations: int = 30,
                  max_distance: float = 1.0, tol_translation: float = 1e-4,
                  tol_rotation: float = 1e-4, pairs=None):
    """Point-to-point ICP restricted to matched instance pairs.

    ``query_groups[i]`` and ``target_groups[i]`` hold the points of the i-th
    matched instance in their own frames. Correspondences never cross
    instance pairs. Returns ``(T_icp, StageReport)``.
    """
    report = StageReport()
    if len(query_groups) < 3:
        report.degraded = True
        report.message = f"only {len(query_groups)} matched instances"
        return T_init, report
    if pairs is None:
        pairs = _GroupedPairs(query_groups, target_groups, max_distance)

    T = T_init
    for it in range(1, max_iterations + 1):
        src, dst = pairs.match(T)
        if len(src) < 3:
            report.degraded = True
            report.message = f"{len(src)} correspondences at iteration {it}"
            return T_init, report
        if it == 1:
            report.start_residual = _rms(src - dst)
        before = float(np.sum((src - dst) ** 2))
        delta = procrustes(src, dst)
        moved = delta.apply(src)
        after = float(np.sum((moved - dst) ** 2))
        report.objective.append((before, after))
        T = delta @ T
        report.iterations = it
        report.correspondences = len(src)
        report.residual = float(np.linalg.norm(moved - dst, axis=1).mean())
        dt, dr = pose_delta(delta, PoseSE3.identity())
        if dt < tol_translation and dr < tol_rotation:
            report.converged = True
            break
    return T, report


def plane_jacobian(T: PoseSE3, query_points, query_normals, target_points):
    """Residuals ``n . (T p_t - p_q)`` and their Jacobian w.r.t. a left increment.

    The increment is ``(omega, v)``, applied as ``(exp(omega), v) o T``.
    """
    moved = T.apply(target_points)
    r = np.einsum("ij,ij->i", query_normals, moved - query_points)
    J = np.hstack([np.cross(moved, query_normals), query_normals])
    return r, J


def plane_objective(T: PoseSE3, query_points, query_normals, target_points) -> float:
    moved = T.apply(target_points)
    r = np.einsum("ij,ij->i", query_normals, moved - query_points)
    return float(r @ r)


def increment(x) -> PoseSE3:
    return PoseSE3(exp_so3(x[:3]), x[3:])


def point_to_plane_refine(query_points, query_normals, target_points, T_init: PoseSE3,
                          target_normals=None, max_iterations: int = 20,
                          max_distance: float = 0.5, tolerance: float = 1e-5,
                          normal_angle: float = 10.0, rank_tolerance: float = 1e-6,
                          normal_neighbors: int = 10):
    """Gauss-Newton on point-to-plane residuals with query-side normals.

    ``query_normals`` is an (n, 3) array or a :class:`NormalField` over
    ``query_points``. Pairs are nearest neighbours within ``max_distance``
    whose normals agree within ``normal_angle`` degrees. Directions of the
    6x6 normal matrix whose eigenvalue falls below ``rank_tolerance`` times
    the largest are left untouched and the report is flagged
    ``rank_deficient``.
    """
    report = StageReport()
    target_points = np.asarray(target_points, dtype=float).reshape(-1, 3)
    if isinstance(query_normals, NormalField):
        qfield = query_normals
    else:
        qfield = NormalField.precomputed(query_points, query_normals)
    if target_normals is None:
        target_normals, _, usable = estimate_normals(target_points, normal_neighbors)
        target_points, target_normals = target_points[usable], target_normals[usable]
    if len(qfield) < 6 or len(target_points) < 6:
        report.degraded = True
        report.message = "fewer than 6 usable points"
        return T_init, report
    query_points = qfield.points
    cos_min = np.cos(np.radians(normal_angle))

    T = T_init
    for it in range(1, max_iterations + 1):
        moved = T.apply(target_points)
        dist, nn = qfield.tree.query(moved, distance_upper_bound=max_distance)
        ok = np.flatnonzero(np.isfinite(dist))
        qn, usable = qfield.normals(nn[ok])
        rotated = target_normals[ok] @ T.rotation.T
        agree = usable & (np.abs(np.einsum("ij,ij->i", qn, rotated)) >= cos_min)
        sel = ok[agree]
        if len(sel) < 6:
            report.degraded = True
            report.message = f"{len(sel)} consistent correspondences at iteration {it}"
            return T_init, report
        qp, qn, tp = query_points[nn[sel]], qn[agree], target_points[sel]
        r, J = plane_jacobian(T, qp, qn, tp)
        H = J.T @ J
        g = J.T @ r
        w, V = np.linalg.eigh(H)
        observable = w > rank_tolerance * w.max()
        if not observable.all():
            if not report.rank_deficient:
                logger.warning("point-to-plane normal matrix has rank %d; "
                               "unobservable directions kept from the initial pose",
                               int(observable.sum()))
            report.rank_deficient = True
        inv = np.zeros_like(w)
        inv[observable] = 1.0 / w[observable]
        x = -(V * inv) @ (V.T @ g)
        before = float(r @ r)
        if it == 1:
            report.start_residual = float(np.sqrt(np.mean(r ** 2)))
        T = increment(x) @ T
        after = plane_objective(T, qp, qn, tp)
        report.objective.append((before, after))
        report.iterations = it
        report.correspondences = len(sel)
        report.residual = float(np.sqrt(after / len(sel)))
        if np.linalg.norm(x[:3]) < tolerance and np.linalg.norm(x[3:]) < tolerance:
            report.converged = True
            break
    return T, report


def instance_residual(T: PoseSE3, query_groups, target_groups, cap: float) -> float:
    """RMS distance of target instance points to their NN in the matched query instance (pairs within ``cap``)."""
    if not query_groups:
        return float("nan")
    return _GroupedPairs(query_groups, target_groups, cap).rms(T)


def plane_residual(T: PoseSE3, query_field: NormalField, target_points, target_normals,
                   cap: float, normal_angle: float = 10.0) -> float:
    """RMS point-to-plane distance over normal-consistent NN pairs within ``cap``."""
    if len(query_field) == 0 or len(target_points) == 0:
        return float("nan")
    moved = T.apply(target_points)
    dist, nn = query_field.tree.query(moved, distance_upper_bound=cap)
    ok = np.flatnonzero(np.isfinite(dist))
    qn, usable = query_field.normals(nn[ok])
    rotated = target_normals[ok] @ T.rotation.T
    agree = usable & (np.abs(np.einsum("ij,ij->i", qn, rotated)) >= np.cos(np.radians(normal_angle)))
    sel = ok[agree]
    r = np.einsum("ij,ij->i", qn[agree], moved[sel] - query_field.points[nn[sel]])
    return float(np.sqrt(np.mean(r ** 2))) if len(r) else float("nan")


def _thin(points, limit):
    if len(points) <= limit:
        return points
    return points[np.linspace(0, len(points) - 1, limit).astype(np.int64)]


def refine(query, candidate, matches, T_coarse: PoseSE3, config) -> RegistrationReport:
    """Coarse pose -> instance ICP -> point-to-plane, each seeded by the previous stage.

    ``query`` and ``candidate`` are :class:`~semloop.features.ScanFeatures`;
    ``matches`` pairs query instance indices with candidate instance indices.
    ``stage_residuals`` holds, per stage, its RMS residual at the incoming
    pose and at its own result.
    """
    residuals = {}
    qg = [query.instance_points(i) for i in matches.query]
    tg = [_thin(candidate.instance_points(j), config.icp_max_points) for j in matches.target]
    pairs = _GroupedPairs(qg, tg, config.icp_max_distance) if qg else None
    T_icp, icp_rep = icp_instances(qg, tg, T_coarse, config.icp_max_iterations,
                                   config.icp_max_distance, config.icp_tol_translation,
                                   config.icp_tol_rotation, pairs=pairs)
    if icp_rep.degraded:
        logger.info("instance ICP degraded (%s); keeping coarse pose", icp_rep.message)
    if qg:
        before = icp_rep.start_residual
        if not np.isfinite(before):
            before = pairs.rms(T_coarse)
        after = before if T_icp is T_coarse else pairs.rms(T_icp)
        if after > before:
            # a stage never hands on a pose that is worse under its own objective
            T_icp, after = T_coarse, before
            icp_rep.reverted = True
        residuals["icp"] = (before, after)

    qfield = query.normal_field(config)
    tp, tn = candidate.plane_points(config)
    cap, angle = config.plane_max_distance, config.plane_normal_angle
    T_ref, plane_rep = point_to_plane_refine(
        None, qfield, tp, T_icp, target_normals=tn, max_iterations=config.plane_max_iterations,
        max_distance=cap, tolerance=config.plane_tolerance, normal_angle=angle,
        rank_tolerance=config.rank_tolerance)
    if plane_rep.degraded:
        logger.info("plane refinement degraded (%s); keeping ICP pose", plane_rep.message)
    before = plane_rep.start_residual
    if not np.isfinite(before):
        before = plane_residual(T_icp, qfield, tp, tn, cap, angle)
    after = before if T_ref is T_icp else plane_residual(T_ref, qfield, tp, tn, cap, angle)
    if after > before:
        T_ref, after = T_icp, before
        plane_rep.reverted = True
    residuals["plane"] = (before, after)
    return RegistrationReport(T_coarse, T_icp, T_ref, icp_rep, plane_rep, residuals)
