"""Paired-bootstrap evaluation harness.

All statistics are pure functions of the data, ``B`` and the RNG seed. The
resample index matrix is drawn in one call from a seeded ``RandomState`` so the
result does not depend on how the work is later split up.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .textio import read_csv, write_csv

DEFAULT_B = 10_000
DEFAULT_SEED = 42
PERCENTILES = (10, 25, 50, 75, 90)


@dataclass(frozen=True)
class PairedSample:
    method: np.ndarray
    baseline: np.ndarray
    seeds: np.ndarray
    env: str = ""
    block: str = "first"

    def __post_init__(self):
        m = np.asarray(self.method, dtype=float)
        b = np.asarray(self.baseline, dtype=float)
        s = np.asarray(self.seeds, dtype=int)
        if not (m.shape == b.shape == s.shape) or m.ndim != 1:
            raise ValueError("method, baseline and seeds must be 1-D and of equal length")
        if len(np.unique(s)) != len(s):
            raise ValueError("seeds must be unique")
        object.__setattr__(self, "method", m)
        object.__setattr__(self, "baseline", b)
        object.__setattr__(self, "seeds", s)

    @property
    def deltas(self) -> np.ndarray:
        return self.method - self.baseline


@dataclass(frozen=True)
class BootstrapSummary:
    delta: float
    ci_low: float
    ci_high: float
    p_two_sided: float
    iqm_delta: float
    iqm_ci_low: float
    iqm_ci_high: float
    p_improve: float
    n: int
    B: int = DEFAULT_B
    rng_seed: int = DEFAULT_SEED

    @property
    def label(self) -> str:
        return significance_label(self.delta, self.p_two_sided)


def percentile_linear(values, p: float) -> float:
    """Percentile by linear interpolation between order statistics at position (n-1)*p/100."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("empty input")
    if not 0 <= p <= 100:
        raise ValueError("p must lie in [0, 100]")
    pos = (x.size - 1) * p / 100
    lo = math.floor(pos)
    hi = min(lo + 1, x.size - 1)
    frac = pos - lo
    return float(x[lo] + (x[hi] - x[lo]) * frac) if frac else float(x[lo])


def _trim(n: int) -> int:
    return n // 4


def iqm(values) -> float:
    x = np.sort(np.asarray(values, dtype=float))
    if x.size < 4:
        raise ValueError("IQM needs at least 4 values")
    k = _trim(x.size)
    return float(x[k:x.size - k].mean())


def p_improve(deltas) -> float:
    d = np.asarray(deltas, dtype=float)
    if d.size == 0:
        raise ValueError("empty input")
    return float((np.count_nonzero(d > 0) + 0.5 * np.count_nonzero(d == 0)) / d.size)


def bootstrap_deltas(d, B: int = DEFAULT_B, rng_seed: int = DEFAULT_SEED) -> BootstrapSummary:
    d = np.asarray(d, dtype=float)
    n = d.size
    if n < 2:
        raise ValueError("paired bootstrap needs n >= 2")
    if B < 1:
        raise ValueError("B must be >= 1")
    idx = np.random.RandomState(rng_seed).randint(0, n, size=(B, n))
    res = d[idx]
    means = res.mean(axis=1)
    p = 2 * min(np.mean(means <= 0), np.mean(means >= 0))
    p = min(1.0, max(1.0 / B, float(p)))
    if n >= 4:
        k = _trim(n)
        iqms = np.sort(res, axis=1)[:, k:n - k].mean(axis=1)
        iqm_d = iqm(d)
        iqm_lo, iqm_hi = percentile_linear(iqms, 2.5), percentile_linear(iqms, 97.5)
    else:
        iqm_d = iqm_lo = iqm_hi = math.nan
    return BootstrapSummary(
        delta=float(d.mean()),
        ci_low=percentile_linear(means, 2.5),
        ci_high=percentile_linear(means, 97.5),
        p_two_sided=p,
        iqm_delta=iqm_d, iqm_ci_low=iqm_lo, iqm_ci_high=iqm_hi,
        p_improve=p_improve(d), n=n, B=B, rng_seed=rng_seed,
    )


def paired_bootstrap(sample: PairedSample, B: int = DEFAULT_B, rng_seed: int = DEFAULT_SEED) -> BootstrapSummary:
    return bootstrap_deltas(sample.deltas, B, rng_seed)


def percentile_delta(method, baseline, ps: Sequence[float] = PERCENTILES) -> dict[float, float]:
    m = np.asarray(method, dtype=float)
    b = np.asarray(baseline, dtype=float)
    if m.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    return {p: percentile_linear(m, p) - percentile_linear(b, p) for p in ps}


def reuse_delta(first: PairedSample, second: PairedSample, B: int = DEFAULT_B,
                rng_seed: int = DEFAULT_SEED) -> BootstrapSummary:
    """Bootstrap of second_return[i] - first_return[i] for the method, paired by index."""
    if len(first.method) != len(second.method):
        raise ValueError("seed blocks differ in length")
    return bootstrap_deltas(second.method - first.method, B, rng_seed)


def significance_label(delta: float, p: float) -> str:
    if p < 0.05 and delta < 0:
        return "NEG"
    if p < 0.001:
        return "***"
    if p < 0.05:
        return "*"
    return "NS"


# --------------------------------------------------------------------------
# CSV plumbing

SUMMARY_FIELDS = ["method", "env", "block", "n", "delta", "ci_low", "ci_high", "p_two_sided",
                  "iqm_delta", "iqm_ci_low", "iqm_ci_high", "p_improve", "B", "rng_seed", "label"]


def read_paired_csv(path: Path | str) -> dict[tuple[str, str, str], PairedSample]:
    """Group rows of (method?, env, block, seed, baseline_return, method_return) by (method, env, block).

    Each sample is seed-sorted; a missing ``method`` column groups under "".
    """
    groups: dict[tuple[str, str, str], list[tuple[int, float, float]]] = {}
    for row in read_csv(path):
        key = (row.get("method", ""), row["env"], row["block"])
        groups.setdefault(key, []).append(
            (int(row["seed"]), float(row["baseline_return"]), float(row["method_return"])))
    out = {}
    for key, rows in sorted(groups.items()):
        rows.sort()
        s, b, m = zip(*rows)
        out[key] = PairedSample(np.array(m), np.array(b), np.array(s), key[1], key[2])
    return out


def summary_row(method: str, sample: PairedSample, s: BootstrapSummary) -> dict:
    row = {"method": method, "env": sample.env, "block": sample.block, **asdict(s)}
    row["label"] = s.label
    return row


def write_summary_csv(path: Path | str, rows: Iterable[dict]) -> None:
    write_csv(path, SUMMARY_FIELDS, ([r[k] for k in SUMMARY_FIELDS] for r in rows))


def format_table(rows: Iterable[dict]) -> str:
    """Fixed-width text table: method, env, block, delta, CI, p, significance."""
    lines = [f"{'method':<14}{'env':<20}{'block':<8}{'delta':>10}  {'95% CI':<22}{'p':>9}  sig",
             "-" * 90]
    for r in rows:
        ci = f"[{r['ci_low']:+.3f}, {r['ci_high']:+.3f}]"
        lines.append(f"{r['method']:<14}{r['env']:<20}{r['block']:<8}{r['delta']:>+10.3f}  {ci:<22}"
                     f"{r['p_two_sided']:>9.4f}  {r['label']}")
    lines.append("* p < 0.05, *** p < 0.001, NS not significant, NEG significant decrease")
    return "\n".join(lines) + "\n"
