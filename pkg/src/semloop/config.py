"""Pipeline tunables."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class PipelineConfig:
    # graph
    d_max: float = 60.0
    k: int = 30
    n_bins: int = 12
    bin_width: float = 5.0
    min_cluster_size: int = 10
    # background BEV
    rings: int = 20
    sectors: int = 60
    max_range: float = 80.0
    # retrieval
    top_n: int = 10
    exclusion_window: int = 300
    keyframe_stride: int = 1
    # verification
    theta_graph: float = 0.58
    theta_bg: float = 0.7
    box_tolerance: float = 0.3
    neighbor_radius: float = 20.0
    triangle_tolerance: float = 0.5
    min_triangles: int = 1
    ransac_iterations: int = 1000
    inlier_threshold: float = 0.5
    candidate_policy: str = "first"
    # instance ICP
    icp_max_iterations: int = 30
    icp_max_distance: float = 1.0
    icp_tol_translation: float = 1e-4
    icp_tol_rotation: float = 1e-4
    icp_max_points: int = 96           # per matched candidate instance, evenly thinned
    # point-to-plane
    plane_max_iterations: int = 20
    plane_max_distance: float = 0.5
    plane_tolerance: float = 1e-5
    plane_normal_angle: float = 10.0
    normal_neighbors: int = 10
    min_planarity: float = 0.4
    voxel_size: float = 0.2
    plane_max_points: int = 2000
    rank_tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive = ["d_max", "bin_width", "max_range", "neighbor_radius", "inlier_threshold",
                    "icp_max_distance", "plane_max_distance", "voxel_size", "icp_tol_translation",
                    "icp_tol_rotation", "plane_tolerance", "rank_tolerance"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        at_least_one = ["k", "n_bins", "rings", "sectors", "top_n", "keyframe_stride",
                        "min_cluster_size", "ransac_iterations", "icp_max_iterations",
                        "plane_max_iterations", "plane_max_points", "icp_max_points"]
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_bins * self.bin_width < self.d_max:
            raise ValueError("n_bins * bin_width must cover d_max")
        if not 0 < self.theta_graph <= 1:
            raise ValueError("theta_graph must be in (0, 1]")
        if not -1 <= self.theta_bg <= 1:
            raise ValueError("theta_bg must be in [-1, 1]")
        if self.box_tolerance < 0 or self.triangle_tolerance < 0:
            raise ValueError("tolerances must be >= 0")
        if self.exclusion_window < 0 or self.min_triangles < 0:
            raise ValueError("exclusion_window and min_triangles must be >= 0")
        if self.normal_neighbors < 3:
            raise ValueError("normal_neighbors must be >= 3")
        if not 0 <= self.min_planarity <= 1:
            raise ValueError("min_planarity must be in [0, 1]")
        if not 0 < self.plane_normal_angle < 90:
            raise ValueError("plane_normal_angle must be in (0, 90) degrees")
        if self.candidate_policy not in ("first", "best"):
            raise ValueError("candidate_policy must be 'first' or 'best'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n")

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.loads(Path(path).read_text())
