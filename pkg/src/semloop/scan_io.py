"""Reading and writing KITTI-style scans, labels, poses and class maps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import PoseSE3, nearest_rotation

logger = logging.getLogger(__name__)

ROLES = ("foreground", "background", "moving")


class DataError(ValueError):
    """Input data could not be parsed or is inconsistent."""


class ScanFormatError(DataError):
    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class LabelError(DataError):
    pass


class PoseParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class SemanticScan:
    """A scan in its sensor frame with optional per-point class ids.

    ``source_index`` maps each kept point back to its record in the file,
    so labels read separately stay aligned after non-finite points are
    dropped.
    """

    points: np.ndarray
    labels: np.ndarray | None = None
    scan_id: int = 0
    dropped_count: int = 0
    source_index: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.points):
                raise LabelError(
                    f"{len(self.labels)} labels for {len(self.points)} points")

    def __len__(self):
        return len(self.points)

    def with_labels(self, labels) -> "SemanticScan":
        """Attach labels read from a file paired with this scan."""
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        raw_count = len(self.points) + self.dropped_count
        if len(labels) != raw_count:
            raise LabelError(f"label file has {len(labels)} records, scan has {raw_count}")
        if self.source_index is not None:
            labels = labels[self.source_index]
        return replace(self, labels=labels)

    def select(self, mask) -> "SemanticScan":
        idx = None if self.source_index is None else self.source_index[mask]
        labels = None if self.labels is None else self.labels[mask]
        return replace(self, points=self.points[mask], labels=labels, source_index=idx)


@dataclass
class ClassMap:
    """Which class ids are graph nodes, background, or discarded.

    ``foreground`` maps class id to ``(name, cluster_radius)``; insertion
    order fixes the layout of every histogram built from it.
    """

    foreground: dict = field(default_factory=dict)
    background: dict = field(default_factory=dict)
    moving: dict = field(default_factory=dict)

    def __post_init__(self):
        fg, bg, mv = set(self.foreground), set(self.background), set(self.moving)
        overlap = (fg & bg) | (fg & mv) | (bg & mv)
        if overlap:
            raise ValueError(f"class ids assigned to more than one role: {sorted(overlap)}")

    @property
    def foreground_ids(self) -> list[int]:
        return list(self.foreground)

    @property
    def background_ids(self) -> list[int]:
        return list(self.background)

    def radius(self, class_id: int) -> float:
        return self.foreground[class_id][1]

    def name(self, class_id: int) -> str:
        for table in (self.foreground, self.background, self.moving):
            if class_id in table:
                entry = table[class_id]
                return entry[0] if isinstance(entry, tuple) else entry
        return str(class_id)

    @classmethod
    def default(cls) -> "ClassMap":
        return cls(
            foreground={10: ("vehicle", 0.8), 80: ("pole", 0.4),
                        71: ("trunk", 0.4), 81: ("lamp", 0.4)},
            background={50: "building", 51: "fence", 40: "road", 70: "vegetation"},
            moving={i: f"moving-{i}" for i in range(252, 260)},
        )

    def dumps(self) -> str:
        lines = ["# class_id = role name [cluster_radius]"]
        for cid, (name, radius) in self.foreground.items():
            lines.append(f"{cid} = foreground {name} {radius!r}")
        for cid, name in self.background.items():
            lines.append(f"{cid} = background {name}")
        for cid, name in self.moving.items():
            lines.append(f"{cid} = moving {name}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ClassMap":
        fg, bg, mv = {}, {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            parts = value.split()
            if not sep or len(parts) < 2:
                raise DataError(f"class map line {lineno}: expected 'id = role name [radius]'")
            try:
                cid = int(key)
            except ValueError:
                raise DataError(f"class map line {lineno}: bad class id {key.strip()!r}") from None
            role, name = parts[0], parts[1]
            if role == "foreground":
                if len(parts) < 3:
                    raise DataError(f"class map line {lineno}: foreground needs a cluster radius")
                fg[cid] = (name, float(parts[2]))
            elif role == "background":
                bg[cid] = name
            elif role == "moving":
                mv[cid] = name
            else:
                raise DataError(f"class map line {lineno}: unknown role {role!r}")
        try:
            return cls(fg, bg, mv)
        except ValueError as exc:
            raise DataError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ClassMap":
        return cls.loads(Path(path).read_text())

    def save(self, path):
        Path(path).write_text(self.dumps())


def drop_moving(scan: SemanticScan, class_map: ClassMap) -> SemanticScan:
    if scan.labels is None or not class_map.moving:
        return scan
    keep = ~np.isin(scan.labels, list(class_map.moving))
    return scan.select(keep)


def load_scan(path, format: str = "kitti_bin", scan_id: int = 0) -> SemanticScan:
    """Read scan geometry. Non-finite points are dropped and counted."""
    path = Path(path)
    if format == "kitti_bin":
        raw = path.read_bytes()
        if len(raw) % 16:
            bad = len(raw) - len(raw) % 16
            raise ScanFormatError(f"{path}: truncated float32 record", bad)
        data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)[:, :3].astype(float)
    elif format == "xyz_text":
        rows = []
        offset = 0
        with open(path, "rb") as fh:
            for line in fh:
                fields = line.split()
                if fields:
                    try:
                        if len(fields) < 3:
                            raise ValueError
                        rows.append([float(v) for v in fields[:3]])
                    except ValueError:
                        raise ScanFormatError(f"{path}: malformed xyz line", offset) from None
                offset += len(line)
        data = np.asarray(rows, dtype=float).reshape(-1, 3)
    else:
        raise ValueError(f"unknown scan format {format!r}")

    finite = np.isfinite(data).all(axis=1)
    dropped = int((~finite).sum())
    if dropped:
        logger.info("%s: dropped %d non-finite points", path, dropped)
    return SemanticScan(points=data[finite], scan_id=scan_id, dropped_count=dropped,
                        source_index=np.flatnonzero(finite))


def load_labels(path, expected_count: int | None = None) -> np.ndarray:
    """SemanticKITTI labels: uint32 records, class id in the lower 16 bits."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise LabelError(f"{path}: size {len(raw)} is not a multiple of 4")
    records = np.frombuffer(raw, dtype="<u4")
    if expected_count is not None and len(records) != expected_count:
        raise LabelError(f"{path}: {len(records)} labels, expected {expected_count}")
    return (records & 0xFFFF).astype(np.int64)


def load_labeled_scan(scan_path, label_path, scan_id=0, format="kitti_bin") -> SemanticScan:
    scan = load_scan(scan_path, format=format, scan_id=scan_id)
    return scan.with_labels(load_labels(label_path))


def save_scan(path, points, intensity=None):
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    out = np.zeros((len(points), 4), dtype="<f4")
    out[:, :3] = points
    if intensity is not None:
        out[:, 3] = intensity
    Path(path).write_bytes(out.tobytes())


def save_labels(path, labels):
    Path(path).write_bytes(np.asarray(labels, dtype="<u4").tobytes())


def format_pose(pose: PoseSE3) -> str:
    return " ".join(repr(float(v)) for v in pose.to_list())


def parse_pose_line(line: str, lineno: int = 0) -> PoseSE3:
    fields = line.split()
    if len(fields) != 12:
        raise PoseParseError(f"expected 12 numbers, got {len(fields)}", lineno)
    try:
        values = np.array([float(v) for v in fields])
    except ValueError:
        raise PoseParseError("non-numeric value", lineno) from None
    if not np.isfinite(values).all():
        raise PoseParseError("non-finite value", lineno)
    m = values.reshape(3, 4)
    R = m[:, :3]
    if np.abs(R.T @ R - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
        R = nearest_rotation(R)
    return PoseSE3(R, m[:, 3])


def load_poses(path) -> list[PoseSE3]:
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                poses.append(parse_pose_line(line, lineno))
    return poses


def save_poses(path, poses):
    Path(path).write_text("".join(format_pose(p) + "\n" for p in poses))
