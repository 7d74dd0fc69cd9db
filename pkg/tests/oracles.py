"""Independent brute-force reference implementations used by several test files."""
import itertools
from functools import lru_cache

import numpy as np


@lru_cache(maxsize=None)
def permutations(n):
    return np.array(list(itertools.permutations(range(n))), dtype=np.int64)


def assignment_cost(C):
    """Exhaustive minimum over all n! permutations of a square cost matrix."""
    C = np.asarray(C, dtype=float)
    P = permutations(C.shape[0])
    return float(C[np.arange(C.shape[0]), P].sum(axis=1).min())


def linear_scan(data, ids, F, top_n, window, current):
    """Plain loop over every entry; ties by smaller id."""
    rows = []
    for sid, row in zip(ids, data):
        if sid <= current - window:
            rows.append((float(np.sqrt(((row - F) ** 2).sum())), int(sid)))
    rows.sort()
    return [(sid, d) for d, sid in rows[:top_n]]


def confusion_sweep(scores, truth):
    """(threshold, P, R) recomputed from scratch at every distinct score, strictest first."""
    out = []
    for tau in sorted(set(scores), reverse=True):
        tp = fp = fn = 0
        for s, t in zip(scores, truth):
            if s >= tau:
                tp += t
                fp += not t
            else:
                fn += t
        out.append((tau, tp / (tp + fp), tp / (tp + fn)))
    return out


def f1_from_sweep(rows):
    best = 0.0
    for _, p, r in rows:
        best = max(best, 0.0 if p + r == 0 else 2 * p * r / (p + r))
    return best


def ep_from_sweep(rows):
    # precision where recall is smallest (strictest threshold on ties)
    r_min = min(r for _, _, r in rows)
    p_r0 = [p for _, p, r in rows if r == r_min][0]
    full = [r for _, p, r in rows if p == 1.0]
    return 0.5 * (p_r0 + (max(full) if full else 0.0))
