"""Embedding-geometry diagnostics: centroid cosines, spread ratios, KS ranking, shift suitability."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .indexer import ClusterSet
from .shiftenv import ID_LABEL

# reported in place of an infinite ratio when two centroids coincide
COINCIDENT = math.inf


def centroid_cosine_matrix(clusters: ClusterSet) -> tuple[tuple[str, ...], np.ndarray]:
    labels = clusters.labels
    M = np.stack([clusters.centroids[c] for c in labels])
    norms = np.linalg.norm(M, axis=1)
    if np.any(norms == 0):
        bad = [c for c, n in zip(labels, norms) if n == 0]
        raise ValueError(f"zero-norm centroid(s): {bad}")
    U = M / norms[:, None]
    C = np.clip(U @ U.T, -1.0, 1.0)
    C = (C + C.T) / 2
    np.fill_diagonal(C, 1.0)
    return labels, C


@dataclass(frozen=True)
class SpreadRow:
    label: str
    spread: float
    ratio_vs_id: float
    ratio_vs_nearest_ood: float
    flagged: bool  # a denominator was zero


def _ratio(num: float, den: float) -> tuple[float, bool]:
    if den == 0:
        return (0.0, False) if num == 0 else (COINCIDENT, True)
    return num / den, False


def spread_ratio(data: Mapping[str, np.ndarray], clusters: ClusterSet) -> list[SpreadRow]:
    """Within-cluster spread (mean distance to own centroid) over between-centroid distances.

    ``ratio_vs_nearest_ood`` is NaN when there is no other shift cluster.
    """
    rows = []
    shift = [c for c in clusters.labels if c != ID_LABEL]
    for label, X in data.items():
        X = np.atleast_2d(X)
        if len(X) < 2:
            raise ValueError(f"need >= 2 points for {label!r}")
        mu = clusters.centroids[label]
        spread = float(np.linalg.norm(X - mu, axis=1).mean())
        flagged = False
        if label == ID_LABEL:
            r_id = 0.0 if spread == 0 else math.nan
        else:
            r_id, f = _ratio(spread, float(np.linalg.norm(mu - clusters.centroids[ID_LABEL])))
            flagged |= f
        others = [c for c in shift if c != label]
        if others:
            nearest = min(float(np.linalg.norm(mu - clusters.centroids[c])) for c in others)
            r_ood, f = _ratio(spread, nearest)
            flagged |= f
        else:
            r_ood = math.nan
        rows.append(SpreadRow(label, spread, r_id, r_ood, flagged))
    return rows


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance sup |F_a - F_b| over the pooled points."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    pts = np.concatenate([a, b])
    Fa = np.searchsorted(a, pts, side="right") / a.size
    Fb = np.searchsorted(b, pts, side="right") / b.size
    return float(np.max(np.abs(Fa - Fb)))


def rank_dims(known: np.ndarray, novel: np.ndarray, top: int = 3) -> list[tuple[int, float]]:
    """Embedding dimensions ordered by KS statistic (ties by lower index)."""
    known, novel = np.atleast_2d(known), np.atleast_2d(novel)
    ks = [ks_statistic(known[:, j], novel[:, j]) for j in range(known.shape[1])]
    order = sorted(range(len(ks)), key=lambda j: (-ks[j], j))
    return [(j, ks[j]) for j in order[:top]]


@dataclass(frozen=True)
class Suitability:
    mean: float
    std: float
    std_over_mean: float
    degraded: bool
    suitable: bool
    flagged: bool  # mean <= 0, ratio undefined


def shift_suitability(returns, id_mean: float, max_cv: float = 0.4,
                      degradation: float = 0.5) -> Suitability:
    r = np.asarray(returns, dtype=float)
    if r.size < 2:
        raise ValueError("need >= 2 returns")
    mean = float(r.mean())
    std = float(r.std(ddof=1))
    degraded = mean < degradation * id_mean
    if mean <= 0:
        return Suitability(mean, std, math.nan, degraded, False, True)
    cv = std / mean
    return Suitability(mean, std, cv, degraded, bool(cv < max_cv and degraded), False)
