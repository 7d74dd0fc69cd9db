"""Per-scan loop closing: describe, retrieve, verify, refine, record."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .config import PipelineConfig
from .features import SceneDescriber
from .geometry import PoseSE3
from .index import KeyframeEntry, KeyframeIndex
from .metrics import LabeledDecision, label_by_distance, pose_errors, registration_recall, summarize
from .registration import refine
from .scan_io import ClassMap, DataError, load_labeled_scan, load_poses
from .synthetic import SceneSpec, random_pair
from .verification import verify

logger = logging.getLogger(__name__)

STAGES = ("describe", "retrieve", "verify", "refine")


def default_threads() -> int:
    """Worker count from ``SEMLOOP_THREADS`` (default 1)."""
    raw = os.environ.get("SEMLOOP_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SEMLOOP_THREADS must be an integer, got {raw!r}") from None
    return max(n, 1)


def _pose_out(T):
    return None if T is None else T.to_list()


def _pose_in(v):
    return None if v is None else PoseSE3.from_list(v)


@dataclass
class LoopRecord:
    query_id: int
    match_id: int = -1                # -1 when no candidate was examined
    accepted: bool = False
    S_graph: float = 0.0
    S_background: float = 0.0
    inliers: int = 0
    retrieval_distance: float | None = None
    T_coarse: PoseSE3 | None = None
    T_icp: PoseSE3 | None = None
    T_refine: PoseSE3 | None = None
    timings: dict = field(default_factory=dict)   # stage -> ms
    candidates: int = 0
    reason: str = ""
    T_gt: PoseSE3 | None = None
    gt_distance: float | None = None

    def __post_init__(self):
        if any(v < 0 for v in self.timings.values()):
            raise ValueError("timings must be >= 0")
        if self.accepted and None in (self.T_coarse, self.T_icp, self.T_refine):
            raise ValueError("an accepted record carries all three poses")

    @property
    def query_ms(self) -> float:
        """Query-side time: own descriptor, retrieval, verification, refinement."""
        return float(sum(self.timings.get(k, 0.0) for k in STAGES))

    @property
    def score(self) -> float | None:
        """Sweep score: S_graph for accepted loops, else the negated retrieval distance."""
        if self.accepted:
            return self.S_graph
        if self.retrieval_distance is not None:
            return -self.retrieval_distance
        return None

    def to_json(self) -> str:
        d = {k: getattr(self, k) for k in ("query_id", "match_id", "accepted", "S_graph",
                                          "S_background", "inliers", "retrieval_distance",
                                          "timings", "candidates", "reason", "gt_distance")}
        for k in ("T_coarse", "T_icp", "T_refine", "T_gt"):
            d[k] = _pose_out(getattr(self, k))
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LoopRecord":
        d = json.loads(line)
        for k in ("T_coarse", "T_icp", "T_refine", "T_gt"):
            d[k] = _pose_in(d.get(k))
        return cls(**d)

    def decision(self) -> LabeledDecision | None:
        """Metric view of this record; None when there is nothing to score."""
        if self.score is None:
            return None
        truth = None if self.gt_distance is None else label_by_distance(self.gt_distance)
        return LabeledDecision(self.query_id, self.match_id, self.score, truth,
                               self.T_refine if self.accepted else None, self.T_gt)


def read_records(path) -> list[LoopRecord]:
    return [LoopRecord.from_json(line) for line in Path(path).read_text().splitlines()
            if line.strip()]


def _ms(t0):
    return (time.perf_counter() - t0) * 1e3


def _check_one(query, candidate, config, class_map, rng):
    """Verify then refine; returns ``(fields, verify_ms, refine_ms)``."""
    t0 = time.perf_counter()
    v = verify(query, candidate, config, class_map.background_ids, rng)
    t_verify = _ms(t0)
    out = dict(accepted=v.accepted, S_graph=v.S_graph, S_background=v.S_background,
               inliers=v.u, reason=v.reason)
    t_refine = 0.0
    if v.accepted:
        t0 = time.perf_counter()
        rep = refine(query, candidate, v.inliers, v.T_coarse, config)
        t_refine = _ms(t0)
        out.update(T_coarse=v.T_coarse, T_icp=rep.T_icp, T_refine=rep.T_refine)
        flags = [f"{name} {what}" for name, st in (("icp", rep.icp), ("plane", rep.plane))
                 for what in ("degraded", "rank_deficient", "reverted") if getattr(st, what)]
        out["reason"] = "; ".join(flags)
    elif len(v.inliers):
        out["T_coarse"] = v.T_coarse
    return out, t_verify, t_refine


class LoopCloser(BaseEstimator):
    """Online loop detector over a stream of labelled scans.

    Each scan is queried against the keyframe database before it is
    inserted, so a scan can never match itself.

    Parameters
    ----------
    config : PipelineConfig, optional
    class_map : ClassMap, optional
    cache_size : int or None
        Number of keyframe feature sets held in memory. Evicted keyframes are
        rebuilt through ``reload(scan_id)`` when they are retrieved again.
    reload : callable, optional
    """

    def __init__(self, config=None, class_map=None, cache_size=None, reload=None):
        self.config = config
        self.class_map = class_map
        self.cache_size = cache_size
        self.reload = reload

    @property
    def config_(self):
        return self.config if self.config is not None else PipelineConfig()

    @property
    def class_map_(self):
        return self.class_map if self.class_map is not None else ClassMap.default()

    def _reset(self):
        cfg = self.config_
        self.describer_ = SceneDescriber(cfg, self.class_map_)
        self.index_ = KeyframeIndex(cfg.top_n, cfg.exclusion_window)
        self.features_ = OrderedDict()
        self.records_ = []
        self.n_seen_ = 0

    def _features(self, scan_id):
        feats = self.features_.get(scan_id)
        if feats is not None:
            self.features_.move_to_end(scan_id)
            return feats
        if self.reload is None:
            raise KeyError(f"features of keyframe {scan_id} were evicted and no reload is set")
        feats = self.describer_.describe(self.reload(scan_id))
        self._remember(scan_id, feats)
        return feats

    def _remember(self, scan_id, feats):
        self.features_[scan_id] = feats
        if self.cache_size is not None:
            while len(self.features_) > self.cache_size:
                self.features_.popitem(last=False)

    def _rng(self, query_id, candidate_id):
        return np.random.default_rng([self.config_.seed, query_id, candidate_id])

    def _search(self, feats, timings):
        """Retrieve and verify candidates for already-described ``feats``."""
        cfg, cmap = self.config_, self.class_map_
        t0 = time.perf_counter()
        hits = self.index_.query(feats.descriptor.fused, cfg.top_n, cfg.exclusion_window,
                                 current_id=feats.scan_id) if len(self.index_) else []
        timings["retrieve"] = _ms(t0)
        rec = LoopRecord(feats.scan_id, timings=timings)
        if not hits:
            rec.reason = "no eligible keyframes"
            return rec
        best = None
        timings["verify"] = timings["refine"] = 0.0
        for n, (cid, dist) in enumerate(hits, 1):
            out, tv, tr = _check_one(feats, self._features(cid), cfg, cmap,
                                     self._rng(feats.scan_id, cid))
            timings["verify"] += tv
            timings["refine"] += tr
            if best is None or (out["accepted"] and (not best[2]["accepted"]
                                                   or out["S_graph"] > best[2]["S_graph"])):
                best = (cid, dist, out, n)
            if out["accepted"] and cfg.candidate_policy == "first":
                break
        cid, dist, out, _ = best
        return LoopRecord(feats.scan_id, cid, retrieval_distance=dist, timings=timings,
                          candidates=n, **out)

    def partial_fit(self, scan, pose=None):
        """Process one scan: query, then insert it as a keyframe. Returns its record."""
        if not hasattr(self, "index_"):
            self._reset()
        timings = {}
        t0 = time.perf_counter()
        feats = self.describer_.describe(scan)
        timings["describe"] = _ms(t0)
        rec = self._search(feats, timings)
        if self.n_seen_ % self.config_.keyframe_stride == 0:
            self.index_.insert(KeyframeEntry(feats.scan_id, feats.descriptor.fused, pose))
            self._remember(feats.scan_id, feats)
        self.n_seen_ += 1
        self.records_.append(rec)
        return rec

    def fit(self, X, y=None, poses=None):
        """Run a whole sequence of scans in id order."""
        self._reset()
        poses = [None] * len(X) if poses is None else poses
        for scan, pose in zip(X, poses):
            self.partial_fit(scan, pose)
        return self

    def predict(self, X):
        """Matched keyframe id per scan (-1 for none), without touching the database."""
        out = np.full(len(X), -1, dtype=np.int64)
        for i, scan in enumerate(X):
            feats = self.describer_.describe(scan)
            rec = self._search(feats, {})
            if rec.accepted:
                out[i] = rec.match_id
        return out

    def register(self, scan_a, scan_b) -> LoopRecord:
        return register_pair(scan_a, scan_b, self.config_, self.class_map_)


def register_pair(scan_a, scan_b, config=None, class_map=None, rng=None) -> LoopRecord:
    """Verification and refinement of one pair, bypassing retrieval.

    ``scan_a`` is the query. The poses map ``scan_b`` points into ``scan_a``'s frame.
    """
    config = config or PipelineConfig()
    class_map = class_map or ClassMap.default()
    describer = SceneDescriber(config, class_map)
    timings = {}
    t0 = time.perf_counter()
    fa = describer.describe(scan_a)
    timings["describe"] = _ms(t0)
    t0 = time.perf_counter()
    fb = describer.describe(scan_b)
    timings["describe_candidate"] = _ms(t0)
    if rng is None:
        rng = np.random.default_rng([config.seed, scan_a.scan_id, scan_b.scan_id])
    out, tv, tr = _check_one(fa, fb, config, class_map, rng)
    timings.update(verify=tv, refine=tr)
    return LoopRecord(scan_a.scan_id, scan_b.scan_id, timings=timings, candidates=1, **out)


# -- sequence mode ---------------------------------------------------------

def sequence_files(scan_dir, label_dir=None):
    """``[(scan_id, scan path, label path)]`` sorted by id."""
    scan_dir = Path(scan_dir)
    if not scan_dir.is_dir():
        raise DataError(f"scan directory {scan_dir} does not exist")
    label_dir = Path(label_dir) if label_dir is not None else scan_dir.parent / "labels"
    files = sorted(scan_dir.glob("*.bin"))
    out = []
    for pos, f in enumerate(files):
        sid = int(f.stem) if f.stem.isdigit() else pos
        out.append((sid, f, label_dir / (f.stem + ".label")))
    out.sort(key=lambda x: x[0])
    return out


def attach_ground_truth(records, poses):
    """Fill ``T_gt`` and ``gt_distance`` from absolute poses indexed by scan id."""
    for rec in records:
        if rec.match_id < 0 or rec.query_id >= len(poses) or rec.match_id >= len(poses):
            continue
        rec.T_gt = poses[rec.query_id].inverse() @ poses[rec.match_id]
        rec.gt_distance = float(np.linalg.norm(rec.T_gt.translation))
    return records


def summarize_records(records) -> dict:
    records = list(records)
    decisions = [d for d in (r.decision() for r in records) if d is not None]
    out = {"scans": len(records), "accepted": sum(r.accepted for r in records)}
    out.update(summarize(decisions))
    times = [r.query_ms for r in records if r.timings]
    if times:
        out["time_p50_ms"] = float(np.percentile(times, 50))
        out["time_p90_ms"] = float(np.percentile(times, 90))
        out["time_max_ms"] = float(np.max(times))
    return out


def process_sequence(scan_dir, label_dir=None, poses_file=None, config=None, class_map=None,
                     records_path=None, cache_size=64):
    """Run the loop closer over a KITTI-layout sequence.

    Records are appended to ``records_path`` as they are produced. Scans that
    fail to load or process are logged and skipped. Returns ``(records, summary)``.
    """
    config = config or PipelineConfig()
    files = sequence_files(scan_dir, label_dir)
    paths = {sid: (s, lab) for sid, s, lab in files}
    poses = load_poses(poses_file) if poses_file is not None else None

    def reload(sid):
        s, lab = paths[sid]
        return load_labeled_scan(s, lab, scan_id=sid)

    closer = LoopCloser(config, class_map, cache_size=cache_size, reload=reload)
    closer._reset()
    records = []
    sink = open(records_path, "w") if records_path is not None else None
    try:
        for sid, s, lab in files:
            try:
                scan = reload(sid)
                pose = poses[sid] if poses is not None and sid < len(poses) else None
                rec = closer.partial_fit(scan, pose)
            except (DataError, ValueError, OSError, np.linalg.LinAlgError) as exc:
                logger.warning("scan %d skipped: %s", sid, exc)
                continue
            if poses is not None:
                attach_ground_truth([rec], poses)
            records.append(rec)
            if sink is not None:
                sink.write(rec.to_json() + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()
    return records, summarize_records(records)


# -- synthetic benchmark ---------------------------------------------------

def _bench_trial(i, spec, config, class_map, reverse):
    rng = np.random.default_rng([spec.seed, i, 7])
    yaw = None
    if reverse:
        yaw = float(rng.choice([-1, 1]) * rng.uniform(np.radians(150), np.pi))
    pair = random_pair(spec.seed + i, replace(spec, seed=spec.seed + i), yaw=yaw,
                       max_range=config.max_range)
    pair.scan_a.scan_id, pair.scan_b.scan_id = 2 * i, 2 * i + 1
    rec = register_pair(pair.scan_a, pair.scan_b, config, class_map)
    rec.T_gt = pair.T_gt
    rec.gt_distance = float(np.linalg.norm(pair.T_gt.translation))
    return rec


def bench(spec=None, trials=100, config=None, class_map=None, reverse_fraction=0.3,
          n_jobs=None):
    """Register ``trials`` synthetic pairs with known relative pose.

    The first ``reverse_fraction`` of the trials use a relative yaw beyond
    150 degrees. Returns ``(records, summary)``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    spec = spec or SceneSpec()
    config = config or PipelineConfig()
    n_rev = math.ceil(reverse_fraction * trials)
    n_jobs = default_threads() if n_jobs is None else n_jobs
    args = [(i, spec, config, class_map, i < n_rev) for i in range(trials)]
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            records = list(pool.map(lambda a: _bench_trial(*a), args))
    else:
        records = [_bench_trial(*a) for a in args]
    return records, bench_summary(records)


def bench_summary(records) -> dict:
    """RR over all trials (a rejected pair counts as a failed registration)."""
    records = list(records)
    errs = np.array([pose_errors(r.T_refine, r.T_gt) if r.accepted else (np.inf, np.inf)
                     for r in records]).reshape(-1, 2)
    ok = errs[np.isfinite(errs[:, 0])]
    out = {"trials": len(records), "accepted": int(sum(r.accepted for r in records)),
           "registration_recall": registration_recall(errs)}
    if len(ok):
        out.update(rte_median=float(np.median(ok[:, 0])), rye_median=float(np.median(ok[:, 1])),
                   rte_mean=float(ok[:, 0].mean()), rye_mean=float(ok[:, 1].mean()))
    times = np.array([r.query_ms for r in records])
    pair_times = np.array([r.query_ms + r.timings.get("describe_candidate", 0.0) for r in records])
    out.update(time_p50_ms=float(np.percentile(times, 50)),
               time_p90_ms=float(np.percentile(times, 90)),
               pair_time_p50_ms=float(np.percentile(pair_times, 50)))
    return out
