"""Scan-level descriptors: foreground graph statistics and semantic polar BEV."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PoseSE3
from .graph import SemanticGraph, edge_histogram


@dataclass
class BackgroundBEV:
    grid: np.ndarray      # (rings, sectors, classes) point counts
    ring_key: np.ndarray  # (rings, classes) fraction of occupied sectors

    @property
    def shape(self):
        return self.grid.shape


@dataclass
class ScanDescriptor:
    foreground: np.ndarray
    background: np.ndarray
    fused: np.ndarray


def foreground_descriptor(graph: SemanticGraph, classes, n_categories: int,
                          n_bins: int = 12, bin_width: float = 5.0) -> np.ndarray:
    """Edge histogram over the whole graph followed by node counts per class."""
    hist = edge_histogram(graph.edge_category, graph.edge_length, n_categories, n_bins, bin_width)
    counts = np.array([np.count_nonzero(graph.labels == c) for c in classes], dtype=float)
    return np.concatenate([hist, counts])


def polar_grid(points, class_index, n_classes: int, rings: int = 20, sectors: int = 60,
               max_range: float = 80.0) -> np.ndarray:
    """Point counts per (ring, sector, class); points beyond ``max_range`` are ignored."""
    if rings < 1 or sectors < 1 or max_range <= 0:
        raise ValueError("rings, sectors must be >= 1 and max_range > 0")
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    class_index = np.asarray(class_index, dtype=np.int64)
    rho = np.hypot(points[:, 0], points[:, 1])
    keep = rho < max_range
    rho, cls = rho[keep], class_index[keep]
    theta = np.arctan2(points[keep, 1], points[keep, 0])
    ring = np.minimum((rho * rings / max_range).astype(np.int64), rings - 1)
    sector = np.minimum(((theta + np.pi) * sectors / (2 * np.pi)).astype(np.int64), sectors - 1)
    flat = (ring * sectors + sector) * n_classes + cls
    counts = np.bincount(flat, minlength=rings * sectors * n_classes)
    return counts.reshape(rings, sectors, n_classes).astype(float)


def ring_key(grid) -> np.ndarray:
    return (np.asarray(grid) > 0).mean(axis=1)


def _background_points(points, labels, background_ids):
    labels = np.asarray(labels)
    ids = np.asarray(background_ids, dtype=np.int64)
    order = np.argsort(ids)
    mask = np.isin(labels, ids)
    idx = order[np.searchsorted(ids[order], labels[mask])]
    return np.asarray(points)[mask], idx


def background_descriptor(points, labels, background_ids, rings: int = 20, sectors: int = 60,
                          max_range: float = 80.0, transform: PoseSE3 | None = None) -> BackgroundBEV:
    """Semantic polar BEV of the background classes.

    With ``transform`` the background points are first mapped by it, which is
    how a candidate scan is brought into the query frame before comparison.
    """
    background_ids = list(background_ids)
    pts, idx = _background_points(points, labels, background_ids)
    if transform is not None:
        pts = transform.apply(pts)
    grid = polar_grid(pts, idx, len(background_ids), rings, sectors, max_range)
    return BackgroundBEV(grid, ring_key(grid))


def realign_background(points, labels, transform: PoseSE3, background_ids, rings=20,
                       sectors=60, max_range=80.0) -> BackgroundBEV:
    return background_descriptor(points, labels, background_ids, rings, sectors, max_range,
                                 transform=transform)


def _unit(v):
    v = np.asarray(v, dtype=float).ravel()
    n = np.linalg.norm(v)
    return v / n if n > 0 else v.copy()


def fuse(foreground, background) -> ScanDescriptor:
    """Unit-normalise each part separately and concatenate."""
    fg = np.asarray(foreground, dtype=float).ravel()
    bg = np.asarray(background, dtype=float).ravel()
    return ScanDescriptor(fg, bg, np.concatenate([_unit(fg), _unit(bg)]))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


_DESC_MAGIC = b"SDSC"
_DESC_VERSION = 1
_DESC_HEADER = "<IIIIIQ"  # version, R, S, C, D', count


def save_descriptors(path, scan_ids, descriptors, rings, sectors, n_classes):
    """Header then int64 scan ids then a flat float32 descriptor block."""
    F = np.asarray(descriptors, dtype="<f4").reshape(len(scan_ids), -1)
    header = _DESC_MAGIC + struct.pack(_DESC_HEADER, _DESC_VERSION, rings, sectors,
                                       n_classes, F.shape[1], len(scan_ids))
    Path(path).write_bytes(header + np.asarray(scan_ids, dtype="<i8").tobytes() + F.tobytes())


def load_descriptors(path):
    """Returns ``(scan_ids, descriptors, dims)`` with dims = (R, S, C, D')."""
    raw = Path(path).read_bytes()
    if raw[:4] != _DESC_MAGIC:
        raise ValueError(f"{path}: not a descriptor file")
    version, R, S, C, D, n = struct.unpack_from(_DESC_HEADER, raw, 4)
    if version != _DESC_VERSION:
        raise ValueError(f"{path}: unsupported descriptor version {version}")
    off = 4 + struct.calcsize(_DESC_HEADER)
    ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    F = np.frombuffer(raw, dtype="<f4", count=n * D, offset=off + 8 * n).reshape(n, D)
    return ids, F.astype(float), (R, S, C, D)
