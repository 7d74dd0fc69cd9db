"""Exact nearest-neighbour keyframe database."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .descriptor import load_descriptors, save_descriptors
from .geometry import PoseSE3


@dataclass
class KeyframeEntry:
    scan_id: int
    descriptor: np.ndarray
    pose: PoseSE3 | None = None


class KeyframeIndex(BaseEstimator):
    """Brute-force Euclidean search over stored scan descriptors.

    Only entries with ``scan_id <= current - exclusion_window`` are eligible,
    which keeps temporally adjacent scans from being proposed as loops.

    Parameters
    ----------
    top_n : int
        Default number of candidates returned by :meth:`query`.
    exclusion_window : int
        Default number of most recent scan ids excluded from results.
    """

    def __init__(self, top_n=10, exclusion_window=300):
        self.top_n = top_n
        self.exclusion_window = exclusion_window

    def _init_storage(self, dim):
        self.dim_ = dim
        self._data = np.zeros((16, dim))
        self._ids = np.zeros(16, dtype=np.int64)
        self.poses_ = {}
        self.n_entries_ = 0

    def __len__(self):
        return getattr(self, "n_entries_", 0)

    @property
    def scan_ids_(self):
        return self._ids[:len(self)].copy()

    @property
    def descriptors_(self):
        return self._data[:len(self)]

    def fit(self, X, y=None, scan_ids=None):
        """Replace the database with the rows of ``X``."""
        X = check_array(X, dtype=float)
        self._init_storage(X.shape[1])
        ids = np.arange(len(X)) if scan_ids is None else np.asarray(scan_ids, dtype=np.int64)
        for sid, row in zip(ids, X):
            self.insert(KeyframeEntry(int(sid), row))
        return self

    def insert(self, entry: KeyframeEntry):
        F = np.asarray(entry.descriptor, dtype=float).ravel()
        if not hasattr(self, "dim_"):
            self._init_storage(len(F))
        if len(F) != self.dim_:
            raise ValueError(f"descriptor has dimension {len(F)}, index expects {self.dim_}")
        n = self.n_entries_
        if n and entry.scan_id <= self._ids[n - 1]:
            raise ValueError(f"scan ids must increase: {entry.scan_id} after {self._ids[n - 1]}")
        if n == len(self._data):
            self._data = np.vstack([self._data, np.zeros_like(self._data)])
            self._ids = np.concatenate([self._ids, np.zeros_like(self._ids)])
        self._data[n] = F
        self._ids[n] = entry.scan_id
        if entry.pose is not None:
            self.poses_[entry.scan_id] = entry.pose
        self.n_entries_ = n + 1

    def query(self, F, top_n=None, exclusion_window=None, current_id=None):
        """Ranked ``[(scan_id, distance), ...]``, ascending distance, ties by scan id.

        ``current_id`` defaults to the newest stored id.
        """
        top_n = self.top_n if top_n is None else top_n
        window = self.exclusion_window if exclusion_window is None else exclusion_window
        if top_n < 1:
            raise ValueError("top_n must be >= 1")
        n = len(self)
        if n == 0:
            return []
        F = np.asarray(F, dtype=float).ravel()
        if len(F) != self.dim_:
            raise ValueError(f"query has dimension {len(F)}, index expects {self.dim_}")
        ids = self._ids[:n]
        if current_id is None:
            current_id = int(ids[-1])
        # ids are sorted, so eligible entries form a prefix
        stop = int(np.searchsorted(ids, current_id - window, side="right"))
        if stop == 0:
            return []
        diff = self._data[:stop] - F
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        m = min(top_n, stop)
        if m < stop:
            part = np.argpartition(dist, m - 1)[:m]
            # include every entry tied with the cut-off so the id tie-break is exact
            part = np.flatnonzero(dist <= dist[part].max())
        else:
            part = np.arange(stop)
        order = part[np.lexsort((ids[part], dist[part]))][:m]
        return [(int(ids[i]), float(dist[i])) for i in order]

    def kneighbors(self, X, n_neighbors=None):
        """sklearn-style batch query without the temporal exclusion."""
        X = check_array(X, dtype=float)
        k = self.top_n if n_neighbors is None else n_neighbors
        last = int(self._ids[len(self) - 1]) if len(self) else 0
        res = [self.query(x, k, exclusion_window=0, current_id=last) for x in X]
        dist = np.array([[d for _, d in r] for r in res])
        ids = np.array([[i for i, _ in r] for r in res])
        return dist, ids

    def save(self, path, rings=0, sectors=0, n_classes=0):
        save_descriptors(path, self.scan_ids_, self.descriptors_, rings, sectors, n_classes)

    @classmethod
    def load(cls, path, **params):
        ids, F, _ = load_descriptors(path)
        return cls(**params).fit(F, scan_ids=ids)
