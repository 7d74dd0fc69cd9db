"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .geometry import PoseSE3
from .scan_io import LabelError, SemanticScan


def check_points(points, min_points=0, name="points") -> np.ndarray:
    """Finite float (n, 3) array."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        points = points.reshape(0, 3)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {points.shape}")
    if len(points) == 0:
        if min_points:
            raise ValueError(f"{name} needs at least {min_points} points")
        return points
    return check_array(points, dtype=float, ensure_min_samples=max(min_points, 1),
                       input_name=name)


def check_scan(scan, require_labels=True) -> SemanticScan:
    if not isinstance(scan, SemanticScan):
        raise TypeError(f"expected SemanticScan, got {type(scan).__name__}")
    check_points(scan.points, name="scan.points")
    if require_labels:
        if scan.labels is None:
            raise LabelError(f"scan {scan.scan_id} has no labels")
        if len(scan.labels) != len(scan.points):
            raise LabelError(f"scan {scan.scan_id}: {len(scan.labels)} labels for "
                             f"{len(scan.points)} points")
        if len(scan.labels) and scan.labels.min() < 0:
            raise LabelError(f"scan {scan.scan_id}: negative class id")
    return scan


def check_pose(pose, tol=1e-6) -> PoseSE3:
    if not isinstance(pose, PoseSE3):
        pose = PoseSE3.from_matrix(np.asarray(pose, dtype=float))
    if not pose.is_valid(tol):
        raise ValueError("pose rotation is not orthonormal with det +1")
    return pose
