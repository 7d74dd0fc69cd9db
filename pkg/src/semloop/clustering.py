"""Euclidean clustering of foreground points into object instances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .scan_io import ClassMap, SemanticScan


@dataclass
class Instance:
    label: int
    indices: np.ndarray
    center: np.ndarray
    box: np.ndarray  # (l, h, w): x-, z- and y-extent

    @property
    def point_count(self) -> int:
        return len(self.indices)


def fit_box(points):
    """Centroid and axis-aligned extents ``(l, h, w)`` of a point set."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("fit_box needs at least one point")
    extent = points.max(axis=0) - points.min(axis=0)
    return points.mean(axis=0), np.array([extent[0], extent[2], extent[1]])


def euclidean_components(points, radius: float) -> np.ndarray:
    """Connected-component id per point for the ``dist <= radius`` graph."""
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])),
                       shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    return comp


def cluster_class(scan: SemanticScan, class_id: int, radius: float,
                  min_cluster_size: int = 10) -> list[Instance]:
    if radius <= 0:
        raise ValueError("radius must be positive")
    if scan.labels is None:
        raise ValueError("scan has no labels")
    member = np.flatnonzero(scan.labels == class_id)
    if len(member) == 0:
        return []
    pts = scan.points[member]
    comp = euclidean_components(pts, radius)
    order = np.argsort(comp, kind="stable")
    bounds = np.flatnonzero(np.diff(comp[order])) + 1
    instances = []
    for group in np.split(order, bounds):
        if len(group) < min_cluster_size:
            continue
        center, box = fit_box(pts[group])
        instances.append(Instance(class_id, member[group], center, box))
    # deterministic order independent of component numbering
    instances.sort(key=lambda inst: inst.indices.min())
    return instances


def extract_instances(scan: SemanticScan, class_map: ClassMap,
                      min_cluster_size: int = 10) -> list[Instance]:
    """Cluster every foreground class with its configured radius."""
    out = []
    for cid in class_map.foreground_ids:
        out.extend(cluster_class(scan, cid, class_map.radius(cid), min_cluster_size))
    return out
