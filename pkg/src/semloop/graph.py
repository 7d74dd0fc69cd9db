"""Foreground semantic graph and per-node descriptors."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

EIG_TIE_TOL = 1e-6


class EigenDecompositionError(RuntimeError):
    pass


class EdgeCategories:
    """Unordered label pairs over an ordered list of foreground classes."""

    def __init__(self, classes):
        self.classes = [int(c) for c in classes]
        self.pairs = list(combinations_with_replacement(range(len(self.classes)), 2))
        n = len(self.classes)
        self.table = np.full((n, n), -1, dtype=np.int64)
        for idx, (a, b) in enumerate(self.pairs):
            self.table[a, b] = self.table[b, a] = idx
        self._pos = {c: i for i, c in enumerate(self.classes)}

    def __len__(self):
        return len(self.pairs)

    def class_index(self, labels) -> np.ndarray:
        try:
            return np.array([self._pos[int(l)] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} is not a foreground class") from None

    def category(self, label_a, label_b) -> np.ndarray:
        return self.table[self.class_index(np.atleast_1d(label_a)),
                          self.class_index(np.atleast_1d(label_b))]


@dataclass
class SemanticGraph:
    centers: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    edge_category: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    edge_length: np.ndarray = field(default_factory=lambda: np.zeros(0))
    adjacency: np.ndarray | None = None
    descriptors: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.centers)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


def build_graph(centers, boxes, labels, d_max: float, categories: EdgeCategories) -> SemanticGraph:
    """Connect every pair of nodes closer than ``d_max``."""
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    centers = np.asarray(centers, dtype=float).reshape(-1, 3)
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = len(centers)
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    A = (dist < d_max).astype(np.int8)
    np.fill_diagonal(A, 0)
    i, j = np.nonzero(np.triu(A, 1))
    edges = np.stack([i, j], axis=1).astype(np.int64).reshape(-1, 2)
    cat = categories.category(labels[i], labels[j]) if len(i) else np.zeros(0, dtype=np.int64)
    return SemanticGraph(centers, boxes, labels, edges, cat, dist[i, j], A)


def graph_from_instances(instances, d_max, categories) -> SemanticGraph:
    if not instances:
        return build_graph(np.zeros((0, 3)), np.zeros((0, 3)), [], d_max, categories)
    return build_graph([x.center for x in instances], [x.box for x in instances],
                       [x.label for x in instances], d_max, categories)


def _length_bins(lengths, n_bins, bin_width):
    return np.minimum((np.asarray(lengths) / bin_width).astype(np.int64), n_bins - 1)


def edge_histogram(categories, lengths, n_categories, n_bins, bin_width) -> np.ndarray:
    """Counts over (edge category x length bin), flattened category-major."""
    flat = np.asarray(categories, dtype=np.int64) * n_bins + _length_bins(lengths, n_bins, bin_width)
    return np.bincount(flat, minlength=n_categories * n_bins).astype(float)


def local_descriptor(graph: SemanticGraph, node: int, n_categories: int,
                     n_bins: int = 12, bin_width: float = 5.0) -> np.ndarray:
    incident = (graph.edges[:, 0] == node) | (graph.edges[:, 1] == node)
    return edge_histogram(graph.edge_category[incident], graph.edge_length[incident],
                          n_categories, n_bins, bin_width)


def local_descriptors(graph: SemanticGraph, n_categories: int, n_bins: int = 12,
                      bin_width: float = 5.0) -> np.ndarray:
    """``local_descriptor`` for every node at once."""
    width = n_categories * n_bins
    out = np.zeros((graph.n_nodes, width))
    if graph.n_edges:
        cell = graph.edge_category * n_bins + _length_bins(graph.edge_length, n_bins, bin_width)
        for end in (0, 1):
            np.add.at(out, (graph.edges[:, end], cell), 1.0)
    return out


def adjacency_eigh(A):
    """Eigenpairs of a symmetric adjacency, eigenvalues descending.

    Inside a block of (near) equal eigenvalues the columns are ordered by
    decreasing l1 norm so the output does not depend on solver ordering.
    """
    A = np.asarray(A, dtype=float)
    try:
        w, Q = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise EigenDecompositionError(f"eigendecomposition of {A.shape} adjacency failed: {exc}") from exc
    if not (np.isfinite(w).all() and np.isfinite(Q).all()):
        raise EigenDecompositionError("eigendecomposition returned non-finite values")
    order = np.argsort(-w, kind="stable")
    w, Q = w[order], Q[:, order]
    start = 0
    n = len(w)
    while start < n:
        stop = start + 1
        while stop < n and w[stop - 1] - w[stop] < EIG_TIE_TOL:
            stop += 1
        if stop - start > 1:
            norms = np.abs(Q[:, start:stop]).sum(axis=0)
            sub = np.argsort(-norms, kind="stable") + start
            Q[:, start:stop] = Q[:, sub]
            w[start:stop] = w[sub]
        start = stop
    return w, Q


def global_embeddings(graph: SemanticGraph, k: int = 30) -> np.ndarray:
    """``|Q[:, :k]|`` per node, zero padded when the graph has fewer than k nodes."""
    n = graph.n_nodes
    out = np.zeros((n, k))
    if n == 0:
        return out
    _, Q = adjacency_eigh(graph.adjacency)
    m = min(k, n)
    out[:, :m] = np.abs(Q[:, :m])
    # an isolated node's row only reflects the arbitrary basis of the null space
    out[graph.adjacency.sum(axis=1) == 0] = 0.0
    return out


def node_descriptors(graph: SemanticGraph, n_categories: int, n_bins: int = 12,
                     bin_width: float = 5.0, k: int = 30) -> SemanticGraph:
    """Fill ``graph.descriptors`` with the local histogram followed by the spectral embedding."""
    f_l = local_descriptors(graph, n_categories, n_bins, bin_width)
    f_g = global_embeddings(graph, k)
    graph.descriptors = np.hstack([f_l, f_g])
    return graph


_GRAPH_MAGIC = b"SGRF"
_GRAPH_VERSION = 1


def save_graph(path, graph: SemanticGraph):
    """Versioned binary record: header, node array, edge array."""
    desc = graph.descriptors if graph.descriptors is not None else np.zeros((graph.n_nodes, 0))
    d = desc.shape[1]
    node_dt = np.dtype([("center", "<f8", 3), ("box", "<f8", 3), ("label", "<i8"), ("f", "<f8", (d,))])
    edge_dt = np.dtype([("ij", "<i8", 2), ("category", "<i8"), ("length", "<f8")])
    nodes = np.zeros(graph.n_nodes, dtype=node_dt)
    nodes["center"], nodes["box"], nodes["label"] = graph.centers, graph.boxes, graph.labels
    if d:
        nodes["f"] = desc
    edges = np.zeros(graph.n_edges, dtype=edge_dt)
    edges["ij"], edges["category"], edges["length"] = graph.edges, graph.edge_category, graph.edge_length
    header = _GRAPH_MAGIC + struct.pack("<IQQI", _GRAPH_VERSION, graph.n_nodes, graph.n_edges, d)
    Path(path).write_bytes(header + nodes.tobytes() + edges.tobytes())


def load_graph(path) -> SemanticGraph:
    raw = Path(path).read_bytes()
    if raw[:4] != _GRAPH_MAGIC:
        raise ValueError(f"{path}: not a graph record")
    version, n, e, d = struct.unpack_from("<IQQI", raw, 4)
    if version != _GRAPH_VERSION:
        raise ValueError(f"{path}: unsupported graph record version {version}")
    node_dt = np.dtype([("center", "<f8", 3), ("box", "<f8", 3), ("label", "<i8"), ("f", "<f8", (d,))])
    edge_dt = np.dtype([("ij", "<i8", 2), ("category", "<i8"), ("length", "<f8")])
    off = 4 + struct.calcsize("<IQQI")
    nodes = np.frombuffer(raw, dtype=node_dt, count=n, offset=off)
    edges = np.frombuffer(raw, dtype=edge_dt, count=e, offset=off + n * node_dt.itemsize)
    A = np.zeros((n, n), dtype=np.int8)
    ij = edges["ij"].astype(np.int64).reshape(-1, 2)
    A[ij[:, 0], ij[:, 1]] = A[ij[:, 1], ij[:, 0]] = 1
    return SemanticGraph(
        centers=nodes["center"].copy(), boxes=nodes["box"].copy(), labels=nodes["label"].copy(),
        edges=ij, edge_category=edges["category"].copy(), edge_length=edges["length"].copy(),
        adjacency=A, descriptors=nodes["f"].reshape(n, d).copy() if d else None)
