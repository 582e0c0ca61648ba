"""Centroid indexing with the in-distribution label as a first-class reject option."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .shiftenv import ID_LABEL
from .textio import fmt, matrix_to_text, parse_matrices


def compute_centroid(embeddings) -> np.ndarray:
    E = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if E.size == 0 or len(E) == 0:
        raise ValueError("cannot compute the centroid of an empty set")
    return E.mean(axis=0)


@dataclass(frozen=True, eq=False)
class ClusterSet:
    """Cluster centroids keyed by label. Must include ``ID``.

    ``id_bias`` multiplies the distance to the ID centroid, so values below 1
    widen the reject region and values above 1 shrink it.
    """

    centroids: Mapping[str, np.ndarray]
    id_bias: float = 1.0
    # ID first, remaining labels sorted: this is also the tie-break order
    labels: tuple[str, ...] = field(init=False)

    def __post_init__(self):
        if ID_LABEL not in self.centroids:
            raise ValueError("ClusterSet must contain the ID centroid")
        if not self.id_bias > 0:
            raise ValueError("id_bias must be > 0")
        dims = {np.asarray(c).shape for c in self.centroids.values()}
        if len(dims) != 1:
            raise ValueError(f"centroids disagree in shape: {dims}")
        cents = {k: np.asarray(v, dtype=float) for k, v in self.centroids.items()}
        object.__setattr__(self, "centroids", cents)
        object.__setattr__(self, "labels", (ID_LABEL, *sorted(k for k in cents if k != ID_LABEL)))
        object.__setattr__(self, "_matrix", np.stack([cents[k] for k in self.labels]))

    @property
    def shift_labels(self) -> tuple[str, ...]:
        return self.labels[1:]

    def subset(self, labels) -> "ClusterSet":
        keep = {ID_LABEL, *labels}
        return ClusterSet({k: v for k, v in self.centroids.items() if k in keep}, self.id_bias)

    def to_text(self) -> str:
        head = f"# clusterset id_bias={fmt(self.id_bias)} labels={','.join(self.labels)}\n"
        return head + matrix_to_text("centroids", self._matrix)

    @classmethod
    def from_text(cls, text: str) -> "ClusterSet":
        head, _, rest = text.partition("\n")
        fields = dict(tok.split("=", 1) for tok in head.split()[2:])
        labels = fields["labels"].split(",")
        mat = parse_matrices(rest)["centroids"]
        return cls(dict(zip(labels, mat)), float(fields["id_bias"]))


@dataclass(frozen=True)
class RoutingDecision:
    assigned: str
    distances: dict


def route_scores(h: np.ndarray, clusters: ClusterSet) -> np.ndarray:
    """Biased distances, batched: h may be (d,) or (n, d); columns follow ``clusters.labels``."""
    H = np.atleast_2d(h)
    diff = H[:, None, :] - clusters._matrix[None, :, :]
    dist = np.sqrt(np.einsum("nkd,nkd->nk", diff, diff))
    dist[:, 0] *= clusters.id_bias
    return dist


def route(h: np.ndarray, clusters: ClusterSet) -> RoutingDecision:
    h = np.asarray(h, dtype=float)
    if h.shape != clusters._matrix.shape[1:]:
        raise ValueError(f"embedding shape {h.shape} does not match centroids")
    scores = route_scores(h, clusters)[0]
    # argmin returns the first minimum, and labels are ordered ID-then-lexicographic
    best = int(np.argmin(scores))
    return RoutingDecision(clusters.labels[best], dict(zip(clusters.labels, scores.tolist())))


def route_batch(H: np.ndarray, clusters: ClusterSet) -> list[str]:
    idx = np.argmin(route_scores(H, clusters), axis=1)
    return [clusters.labels[i] for i in idx]


def routing_stats(embeddings: Mapping[str, np.ndarray], clusters: ClusterSet) -> list[dict]:
    """Per-label routing fractions (reject-to-ID, assign-to-c, total activation)."""
    if not embeddings:
        raise ValueError("no embeddings given")
    rows = []
    for label, E in embeddings.items():
        E = np.atleast_2d(E)
        if len(E) == 0:
            raise ValueError(f"no embeddings for {label!r}")
        assigned = np.argmin(route_scores(E, clusters), axis=1)
        counts = np.bincount(assigned, minlength=len(clusters.labels))
        fracs = counts / len(E)
        row = {"label": label, "reject_frac": float(fracs[0])}
        for j, c in enumerate(clusters.shift_labels, start=1):
            row[f"assign_{c}"] = float(fracs[j])
        row["total_activation"] = float(1.0 - fracs[0])
        rows.append(row)
    return rows


def centroid_distance_table(clusters: ClusterSet, embeddings: Mapping[str, np.ndarray]) -> list[dict]:
    """Mean Euclidean distance from each label's embeddings to every centroid."""
    rows = []
    for label, E in embeddings.items():
        E = np.atleast_2d(E)
        if len(E) == 0:
            raise ValueError(f"no embeddings for {label!r}")
        means = {}
        for c in clusters.labels:
            means[c] = float(np.linalg.norm(E - clusters.centroids[c], axis=1).mean())
        nearest = min(clusters.labels, key=lambda c: (means[c], clusters.labels.index(c)))
        rows.append({"label": label, **{f"dist_{c}": means[c] for c in clusters.labels}, "nearest": nearest})
    return rows


def calibrate_id_bias(id_embeddings: np.ndarray, clusters: ClusterSet, keep: float = 0.97) -> float:
    """Largest ``id_bias`` that still routes at least ``keep`` of the given ID embeddings to ID.

    A point routes to ID iff bias <= min_c d_c / d_ID, so the answer is an order
    statistic of that ratio. Returns ``clusters.id_bias`` when there are no shift clusters.
    """
    if not 0 < keep <= 1:
        raise ValueError("keep must lie in (0, 1]")
    if not clusters.shift_labels:
        return clusters.id_bias
    E = np.atleast_2d(np.asarray(id_embeddings, dtype=float))
    dist = route_scores(E, ClusterSet(clusters.centroids, 1.0))
    d_id = dist[:, 0]
    d_other = dist[:, 1:].min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(d_id > 0, d_other / d_id, np.inf)
    ratio = np.sort(ratio)
    k = int(np.floor((1 - keep) * len(ratio) + 1e-12))
    beta = float(ratio[min(k, len(ratio) - 1)])
    if not np.isfinite(beta) or beta <= 0:
        raise ValueError("ID embeddings coincide with a shift centroid; cannot calibrate")
    # beta * d_ID can round above d_other at the boundary point; step down an ulp at a time
    need = len(ratio) - k
    while np.count_nonzero(beta * d_id <= d_other) < need and beta > 0:
        beta = float(np.nextafter(beta, 0.0))
    return beta
