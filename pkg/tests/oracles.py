"""Slow, loop-based reference implementations used as independent test oracles.

Nothing here imports from the package: each function is written directly from
the definition of the statistic.
"""

import math

import numpy as np


def percentile(values, p):
    x = sorted(float(v) for v in values)
    pos = (len(x) - 1) * p / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(x) - 1)
    return x[lo] + (x[hi] - x[lo]) * (pos - lo)


def iqm(values):
    x = sorted(float(v) for v in values)
    k = len(x) // 4
    kept = x[k:len(x) - k]
    return math.fsum(kept) / len(kept)


def p_improve(deltas):
    score = 0.0
    for d in deltas:
        score += 1.0 if d > 0 else 0.5 if d == 0 else 0.0
    return score / len(deltas)


def bootstrap(deltas, B, seed):
    """Scalar-draw paired bootstrap: one randint call per resampled index."""
    d = [float(v) for v in deltas]
    n = len(d)
    rs = np.random.RandomState(seed)
    means, iqms = [], []
    for _ in range(B):
        sample = [d[rs.randint(0, n)] for _ in range(n)]
        means.append(math.fsum(sample) / n)
        if n >= 4:
            iqms.append(iqm(sample))
    le = sum(1 for m in means if m <= 0) / B
    ge = sum(1 for m in means if m >= 0) / B
    p = min(1.0, max(1.0 / B, 2 * min(le, ge)))
    out = {
        "delta": math.fsum(d) / n,
        "ci_low": percentile(means, 2.5),
        "ci_high": percentile(means, 97.5),
        "p_two_sided": p,
        "p_improve": p_improve(d),
    }
    if n >= 4:
        out.update(iqm_delta=iqm(d), iqm_ci_low=percentile(iqms, 2.5), iqm_ci_high=percentile(iqms, 97.5))
    return out


def auc_pairs(id_scores, ood_scores):
    wins = 0.0
    for x in id_scores:
        for y in ood_scores:
            wins += 1.0 if y > x else 0.5 if y == x else 0.0
    return wins / (len(id_scores) * len(ood_scores))


def ks_enumerate(a, b):
    """sup over every pooled point of |F_a - F_b|, counting by enumeration."""
    best = 0.0
    for t in list(a) + list(b):
        fa = sum(1 for v in a if v <= t) / len(a)
        fb = sum(1 for v in b if v <= t) / len(b)
        best = max(best, abs(fa - fb))
    return best
