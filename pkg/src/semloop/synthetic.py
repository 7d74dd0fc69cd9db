"""Randomised labelled scenes with exact ground truth, for testing and benchmarks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PoseSE3
from .scan_io import SemanticScan, save_labels, save_scan

VEHICLE, POLE, TRUNK, LAMP = 10, 80, 71, 81
BUILDING, FENCE, ROAD, VEGETATION = 50, 51, 40, 70
SENSOR_HEIGHT = 1.73

# (height, class) of the vertical background rectangles
WALL_KINDS = {"building": (8.0, BUILDING), "fence": (1.5, FENCE), "vegetation": (2.5, VEGETATION)}


@dataclass
class SceneSpec:
    poles: int = 8
    trunks: int = 6
    lamps: int = 3
    vehicles: int = 4
    buildings: int = 4
    fences: int = 3
    vegetation: int = 3
    ground: bool = True
    extent: float = 80.0           # side of the square scene, meters
    noise: float = 0.02            # per-axis Gaussian sigma, meters
    background_density: float = 1.0  # points per square meter
    instance_points: int = 120     # per pole/trunk; lamps 1.25x, vehicles 3.5x
    min_separation: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be > 0")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        counts = [self.poles, self.trunks, self.lamps, self.vehicles,
                  self.buildings, self.fences, self.vegetation]
        if min(counts) < 0:
            raise ValueError("counts must be >= 0")

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls(**json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")


@dataclass
class Scene:
    points: np.ndarray
    labels: np.ndarray
    instance_ids: np.ndarray      # -1 for background
    instance_labels: np.ndarray
    instance_centers: np.ndarray  # true centroids of the sampled surfaces
    spec: SceneSpec = field(default_factory=SceneSpec)

    @property
    def n_instances(self) -> int:
        return len(self.instance_labels)


@dataclass
class ScenePair:
    scan_a: SemanticScan
    scan_b: SemanticScan
    T_gt: PoseSE3                 # maps b-frame points into the a-frame
    instances_a: np.ndarray       # scene instance id per point, -1 background
    instances_b: np.ndarray
    pose_a: PoseSE3
    pose_b: PoseSE3


def _cylinder(rng, n, radius, height, base=(0.0, 0.0, 0.0)):
    theta = rng.uniform(0, 2 * np.pi, n)
    z = rng.uniform(0, height, n)
    return np.column_stack([radius * np.cos(theta), radius * np.sin(theta), z]) + base


def _box_shell(rng, n, size, yaw, base):
    """Uniform samples over the six faces of a box standing on ``base``."""
    lx, ly, lz = size
    areas = np.array([ly * lz, ly * lz, lx * lz, lx * lz, lx * ly, lx * ly])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, (n, 3)) * size
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    u[np.arange(n), axis] = sign * np.array(size)[axis]
    u[:, 2] += lz / 2
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return u @ R.T + base


def _rectangle(rng, density, origin, axis_u, axis_v):
    """Uniform samples on the parallelogram spanned by two edge vectors."""
    area = np.linalg.norm(np.cross(axis_u, axis_v))
    n = max(int(round(area * density)), 1)
    a = rng.uniform(0, 1, (n, 1))
    b = rng.uniform(0, 1, (n, 1))
    return origin + a * axis_u + b * axis_v


def _place(rng, count, half, occupied, min_sep, max_tries=2000):
    spots = []
    for _ in range(count):
        for _ in range(max_tries):
            p = rng.uniform(-half, half, 2)
            if all(np.hypot(*(p - q)) >= min_sep for q in occupied):
                occupied.append(p)
                spots.append(p)
                break
        else:
            raise ValueError("could not place all instances; lower counts or min_separation")
    return spots


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    half = spec.extent / 2
    pts, labs, ids = [], [], []
    inst_labels, inst_centers = [], []
    occupied = []
    n_inst = spec.instance_points

    def add_instance(cloud, label):
        iid = len(inst_labels)
        pts.append(cloud)
        labs.append(np.full(len(cloud), label))
        ids.append(np.full(len(cloud), iid))
        inst_labels.append(label)
        inst_centers.append(cloud.mean(axis=0))

    margin = half - 3.0
    for x, y in _place(rng, spec.poles, margin, occupied, spec.min_separation):
        add_instance(_cylinder(rng, n_inst, 0.15, 4.0, (x, y, 0.0)), POLE)
    for x, y in _place(rng, spec.trunks, margin, occupied, spec.min_separation):
        add_instance(_cylinder(rng, n_inst, 0.25, 3.0, (x, y, 0.0)), TRUNK)
    for x, y in _place(rng, spec.lamps, margin, occupied, spec.min_separation):
        n_head = n_inst // 4
        yaw = rng.uniform(0, 2 * np.pi)
        post = _cylinder(rng, n_inst, 0.12, 5.0, (x, y, 0.0))
        head_base = np.array([x + 0.5 * np.cos(yaw), y + 0.5 * np.sin(yaw), 4.85])
        head = _box_shell(rng, n_head, np.array([1.0, 0.3, 0.3]), yaw, head_base)
        add_instance(np.vstack([post, head]), LAMP)
    for x, y in _place(rng, spec.vehicles, margin, occupied, spec.min_separation):
        cloud = _box_shell(rng, int(3.5 * n_inst), np.array([4.5, 1.8, 1.6]),
                           rng.uniform(0, 2 * np.pi), np.array([x, y, 0.0]))
        add_instance(cloud, VEHICLE)

    if spec.ground:
        g = _rectangle(rng, spec.background_density, np.array([-half, -half, 0.0]),
                       np.array([spec.extent, 0.0, 0.0]), np.array([0.0, spec.extent, 0.0]))
        pts.append(g)
        labs.append(np.full(len(g), ROAD))
        ids.append(np.full(len(g), -1))
    for kind, count in (("building", spec.buildings), ("fence", spec.fences),
                        ("vegetation", spec.vegetation)):
        height, label = WALL_KINDS[kind]
        for _ in range(count):
            length = rng.uniform(10.0, 25.0)
            yaw = rng.uniform(0, np.pi)
            start = np.append(rng.uniform(-half, half, 2), 0.0)
            u = length * np.array([np.cos(yaw), np.sin(yaw), 0.0])
            w = _rectangle(rng, spec.background_density, start, u, np.array([0.0, 0.0, height]))
            pts.append(w)
            labs.append(np.full(len(w), label))
            ids.append(np.full(len(w), -1))

    if not pts:
        return Scene(np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                     np.zeros(0, dtype=np.int64), np.zeros((0, 3)), spec)
    return Scene(np.vstack(pts), np.concatenate(labs).astype(np.int64),
                 np.concatenate(ids).astype(np.int64), np.array(inst_labels, dtype=np.int64),
                 np.array(inst_centers).reshape(-1, 3), spec)


def observe(scene: Scene, pose: PoseSE3, max_range: float = 80.0, noise: float | None = None,
            rng=None, scan_id: int = 0):
    """Scene points within ``max_range`` of the sensor, in the sensor frame.

    Returns ``(scan, instance_ids)``.
    """
    rng = np.random.default_rng(rng)
    sigma = scene.spec.noise if noise is None else noise
    local = pose.inverse().apply(scene.points)
    keep = np.linalg.norm(local, axis=1) < max_range
    local = local[keep]
    if sigma > 0:
        local = local + rng.normal(0.0, sigma, local.shape)
    scan = SemanticScan(local, scene.labels[keep], scan_id=scan_id)
    return scan, scene.instance_ids[keep]


def observe_pair(scene: Scene, pose_a: PoseSE3, pose_b: PoseSE3, max_range: float = 80.0,
                 noise: float | None = None, rng=None) -> ScenePair:
    rng = np.random.default_rng(rng)
    scan_a, ids_a = observe(scene, pose_a, max_range, noise, rng, scan_id=0)
    scan_b, ids_b = observe(scene, pose_b, max_range, noise, rng, scan_id=1)
    return ScenePair(scan_a, scan_b, pose_a.inverse() @ pose_b, ids_a, ids_b, pose_a, pose_b)


def sensor_pose(x=0.0, y=0.0, yaw=0.0, roll=0.0, pitch=0.0, z=SENSOR_HEIGHT) -> PoseSE3:
    return PoseSE3.from_xyz_rpy(x, y, z, roll, pitch, yaw)


def random_pair(seed: int, spec: SceneSpec | None = None, max_offset: float = 3.0,
                yaw: float | None = None, max_tilt_deg: float = 1.0,
                max_range: float = 80.0) -> ScenePair:
    """Scene from ``seed`` seen from two poses at most ``max_offset`` apart.

    ``yaw`` fixes the relative heading; by default it is uniform.
    """
    rng = np.random.default_rng([seed, 1])
    spec = SceneSpec(seed=seed) if spec is None else spec
    scene = generate_scene(spec)
    tilt = np.radians(max_tilt_deg)
    pose_a = sensor_pose(*rng.uniform(-5, 5, 2), yaw=rng.uniform(-np.pi, np.pi),
                         roll=rng.uniform(-tilt, tilt), pitch=rng.uniform(-tilt, tilt))
    r = max_offset * np.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    dyaw = rng.uniform(-np.pi, np.pi) if yaw is None else yaw
    rel = PoseSE3.from_xyz_rpy(r * np.cos(phi), r * np.sin(phi), rng.uniform(-0.1, 0.1),
                               rng.uniform(-tilt, tilt), rng.uniform(-tilt, tilt), dyaw)
    return observe_pair(scene, pose_a, pose_a @ rel, max_range, rng=rng)


def disjoint_pair(seed: int, spec: SceneSpec | None = None, max_range: float = 80.0):
    """Two unrelated scenes, each seen from its centre. Returns ``(scan_a, scan_b)``."""
    spec = SceneSpec() if spec is None else spec
    rng = np.random.default_rng([seed, 2])
    scans = []
    for k in range(2):
        scene = generate_scene(SceneSpec(**{**asdict(spec), "seed": seed * 2 + k + 10_000}))
        pose = sensor_pose(yaw=rng.uniform(-np.pi, np.pi))
        scans.append(observe(scene, pose, max_range, rng=rng, scan_id=k)[0])
    return scans[0], scans[1]


def export_sequence(directory, scans, poses=None):
    """Write scans as ``velodyne/NNNNNN.bin`` plus ``labels/NNNNNN.label`` (and ``poses.txt``)."""
    from .scan_io import save_poses

    root = Path(directory)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for i, scan in enumerate(scans):
        save_scan(root / "velodyne" / f"{i:06d}.bin", scan.points)
        save_labels(root / "labels" / f"{i:06d}.label", scan.labels)
    if poses is not None:
        save_poses(root / "poses.txt", poses)
    return root


def path_poses(waypoints, step: float, z=SENSOR_HEIGHT):
    """Sensor poses every ``step`` meters along a polyline, heading along the path."""
    waypoints = np.asarray(waypoints, dtype=float)
    poses = []
    for a, b in zip(waypoints[:-1], waypoints[1:]):
        seg = b - a
        length = np.hypot(*seg)
        yaw = np.arctan2(seg[1], seg[0])
        for s in np.arange(0.0, length - 1e-9, step):
            x, y = a + seg * (s / length)
            poses.append(sensor_pose(x, y, yaw, z=z))
    x, y = waypoints[-1]
    poses.append(sensor_pose(x, y, poses[-1].yaw if poses else 0.0, z=z))
    return poses


def observe_sequence(scene: Scene, poses, max_range: float = 80.0, noise=None, rng=None):
    """One scan per pose, ids 0..n-1, each with fresh noise."""
    rng = np.random.default_rng(rng)
    return [observe(scene, pose, max_range, noise, rng, scan_id=i)[0]
            for i, pose in enumerate(poses)]
