"""Per-scan feature extraction as a scikit-learn transformer."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .clustering import Instance, extract_instances
from .config import PipelineConfig
from .descriptor import (BackgroundBEV, ScanDescriptor, background_descriptor,
                         foreground_descriptor, fuse)
from .registration import NormalField, voxel_downsample
from .graph import EdgeCategories, SemanticGraph, graph_from_instances, node_descriptors
from .scan_io import ClassMap, SemanticScan, drop_moving
from .validation import check_scan


@dataclass
class ScanFeatures:
    """Everything later stages need from one scan, without the raw cloud."""

    scan_id: int
    instances: list[Instance]
    instance_clouds: list[np.ndarray]
    graph: SemanticGraph
    background_points: np.ndarray
    background_labels: np.ndarray
    bev: BackgroundBEV
    descriptor: ScanDescriptor
    _normal_field: NormalField | None = field(default=None, repr=False)

    def instance_points(self, i) -> np.ndarray:
        return self.instance_clouds[i]

    def normal_field(self, config: PipelineConfig) -> NormalField:
        """Lazily built; normals are only estimated where registration needs them."""
        if self._normal_field is None:
            self._normal_field = NormalField(self.background_points, config.normal_neighbors,
                                             config.min_planarity)
        return self._normal_field

    def plane_points(self, config: PipelineConfig):
        """Evenly thinned background points with usable normals, as ``(points, normals)``."""
        nf = self.normal_field(config)
        n = len(nf)
        idx = np.arange(n)
        if n > config.plane_max_points:
            idx = np.linspace(0, n - 1, config.plane_max_points).astype(np.int64)
        normals, usable = nf.normals(idx)
        return nf.points[idx[usable]], normals[usable]


class SceneDescriber(BaseEstimator, TransformerMixin):
    """Turns labelled scans into semantic graphs and retrieval descriptors.

    ``transform`` returns the fused descriptor matrix; :meth:`describe`
    keeps every intermediate product for verification and registration.
    """

    def __init__(self, config=None, class_map=None):
        self.config = config
        self.class_map = class_map

    @property
    def config_(self) -> PipelineConfig:
        return self.config if self.config is not None else PipelineConfig()

    @property
    def class_map_(self) -> ClassMap:
        return self.class_map if self.class_map is not None else ClassMap.default()

    @property
    def categories_(self) -> EdgeCategories:
        return EdgeCategories(self.class_map_.foreground_ids)

    @property
    def n_features_out_(self) -> int:
        cfg, cmap = self.config_, self.class_map_
        n_fg = len(cmap.foreground_ids)
        return len(self.categories_) * cfg.n_bins + n_fg + cfg.rings * len(cmap.background_ids)

    def fit(self, X=None, y=None):
        return self

    def describe(self, scan: SemanticScan) -> ScanFeatures:
        cfg, cmap = self.config_, self.class_map_
        scan = drop_moving(check_scan(scan), cmap)
        cats = self.categories_
        instances = extract_instances(scan, cmap, cfg.min_cluster_size)
        graph = graph_from_instances(instances, cfg.d_max, cats)
        node_descriptors(graph, len(cats), cfg.n_bins, cfg.bin_width, cfg.k)
        bg = np.isin(scan.labels, cmap.background_ids)
        bg_pts, bg_lab = voxel_downsample(scan.points[bg], cfg.voxel_size, scan.labels[bg])
        bev = background_descriptor(bg_pts, bg_lab, cmap.background_ids,
                                    cfg.rings, cfg.sectors, cfg.max_range)
        f_fg = foreground_descriptor(graph, cmap.foreground_ids, len(cats), cfg.n_bins, cfg.bin_width)
        clouds = [scan.points[inst.indices] for inst in instances]
        return ScanFeatures(scan.scan_id, instances, clouds, graph, bg_pts, bg_lab, bev,
                            fuse(f_fg, bev.ring_key))

    def transform(self, X):
        if isinstance(X, SemanticScan):
            X = [X]
        out = np.zeros((len(X), self.n_features_out_))
        for row, scan in enumerate(X):
            out[row] = self.describe(scan).descriptor.fused
        return out
