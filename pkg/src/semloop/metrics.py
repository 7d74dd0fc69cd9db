"""Loop detection and registration metrics: PR sweep, F1max, EP, RR, RTE, RYE."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PoseSE3

POSITIVE_DISTANCE = 3.0
NEGATIVE_DISTANCE = 20.0
MAX_RTE = 2.0
MAX_RYE = 5.0


@dataclass
class LabeledDecision:
    query_id: int
    candidate_id: int
    score: float
    is_true_loop: bool | None   # None: gray zone, excluded from PR statistics
    T_est: PoseSE3 | None = None
    T_gt: PoseSE3 | None = None

    def __post_init__(self):
        self.score = float(self.score)
        if not math.isfinite(self.score):
            raise ValueError(f"decision score must be finite, got {self.score}")


def label_by_distance(distance, positive=POSITIVE_DISTANCE, negative=NEGATIVE_DISTANCE):
    """True below ``positive`` meters, False beyond ``negative``, None in between."""
    if distance < positive:
        return True
    if distance > negative:
        return False
    return None


def _labeled(decisions):
    scores = np.array([d.score for d in decisions if d.is_true_loop is not None], dtype=float)
    truth = np.array([bool(d.is_true_loop) for d in decisions if d.is_true_loop is not None],
                     dtype=bool)
    return scores, truth


def pr_sweep(decisions):
    """``[(threshold, precision, recall), ...]`` from strictest to loosest threshold.

    A decision is predicted positive when ``score >= threshold``; every
    distinct score of a labelled decision is used as a threshold.
    """
    scores, truth = _labeled(decisions)
    n_pos = int(truth.sum())
    if n_pos == 0 or n_pos == len(truth):
        raise ValueError("pr_sweep needs at least one positive and one negative decision")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truth[order]
    tp = np.cumsum(t)
    predicted = np.arange(1, len(s) + 1)
    # last position of each run of equal scores
    ends = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    return [(float(s[i]), float(tp[i] / predicted[i]), float(tp[i] / n_pos)) for i in ends]


def f1_max(sweep) -> float:
    if not len(sweep):
        raise ValueError("empty sweep")
    best = 0.0
    for _, p, r in sweep:
        if p + r > 0:
            best = max(best, 2 * p * r / (p + r))
    return best


def extended_precision(sweep) -> float:
    """Mean of the precision at minimum recall and the max recall at full precision."""
    if not len(sweep):
        raise ValueError("empty sweep")
    p_r0 = min(sweep, key=lambda x: (x[2], -x[0]))[1]
    r_p100 = max((r for _, p, r in sweep if p == 1.0), default=0.0)
    return 0.5 * (p_r0 + r_p100)


def pose_errors(T: PoseSE3, T_gt: PoseSE3):
    """``(RTE meters, RYE degrees)``; yaw is taken about the z axis."""
    rte = float(np.linalg.norm(T.translation - T_gt.translation))
    dyaw = math.degrees(T.yaw - T_gt.yaw)
    rye = abs((dyaw + 180.0) % 360.0 - 180.0)
    return rte, rye


def registration_recall(errors, max_rte=MAX_RTE, max_rye=MAX_RYE) -> float:
    errors = np.asarray(errors, dtype=float).reshape(-1, 2)
    if len(errors) == 0:
        raise ValueError("registration_recall needs at least one pose error")
    ok = (errors[:, 0] < max_rte) & (errors[:, 1] < max_rye)
    return float(100.0 * ok.sum() / len(errors))


def summarize(decisions) -> dict:
    """Every metric the decision list supports, as an ordered dict."""
    decisions = list(decisions)
    scores, truth = _labeled(decisions)
    out = {"decisions": len(decisions), "positives": int(truth.sum()),
           "negatives": int((~truth).sum()),
           "excluded": len(decisions) - len(truth)}
    try:
        sweep = pr_sweep(decisions)
    except ValueError:
        sweep = None
    if sweep is not None:
        out["f1_max"] = f1_max(sweep)
        out["extended_precision"] = extended_precision(sweep)
    errs = [pose_errors(d.T_est, d.T_gt) for d in decisions
            if d.is_true_loop and d.T_est is not None and d.T_gt is not None]
    if errs:
        errs = np.array(errs)
        out["registrations"] = len(errs)
        out["registration_recall"] = registration_recall(errs)
        out["rte_median"] = float(np.median(errs[:, 0]))
        out["rye_median"] = float(np.median(errs[:, 1]))
        out["rte_mean"] = float(errs[:, 0].mean())
        out["rye_mean"] = float(errs[:, 1].mean())
    return out


def write_summary(path, summary: dict):
    """Tab-separated ``metric<TAB>value`` lines."""
    lines = [f"{k}\t{float(v)!r}" if isinstance(v, (float, np.floating)) else f"{k}\t{v}"
             for k, v in summary.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        key, value = line.split("\t", 1)
        try:
            out[key] = int(value)
        except ValueError:
            out[key] = float(value)
    return out


def write_pr_table(path, sweep):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for row in sweep:
            w.writerow([repr(float(x)) for x in row])
