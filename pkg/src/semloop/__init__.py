"""Loop closing for semantically labelled LiDAR scans using instance graphs."""
from .config import PipelineConfig
from .features import ScanFeatures, SceneDescriber
from .geometry import PoseSE3
from .index import KeyframeEntry, KeyframeIndex
from .pipeline import LoopCloser, LoopRecord, bench, process_sequence, register_pair
from .scan_io import ClassMap, DataError, SemanticScan, load_labeled_scan, load_poses, load_scan
from .synthetic import SceneSpec, generate_scene, observe_pair, random_pair

__version__ = "0.1.0"

__all__ = [
    "ClassMap", "DataError", "KeyframeEntry", "KeyframeIndex", "LoopCloser", "LoopRecord",
    "PipelineConfig", "PoseSE3", "ScanFeatures", "SceneDescriber", "SceneSpec", "SemanticScan",
    "bench", "generate_scene", "load_labeled_scan", "load_poses", "load_scan", "observe_pair",
    "process_sequence", "random_pair", "register_pair",
]
