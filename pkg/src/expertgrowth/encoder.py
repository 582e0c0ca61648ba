"""Frozen representation: observation windows -> random tanh features -> PCA."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .shiftenv import _asset_path
from .textio import matrix_to_text, parse_matrices

FEATURE_DIM = 128
WINDOW = 3


def generate_featurizer_constants(in_dim: int, feature_dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(feature_dim, in_dim)) * (1.5 / np.sqrt(in_dim))
    c = rng.normal(size=feature_dim) * 0.1
    return M, c


@functools.lru_cache(maxsize=None)
def featurizer_constants(in_dim: int = WINDOW * 32, feature_dim: int = FEATURE_DIM,
                         seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    path = _asset_path(f"featurizer_seed{seed}_in{in_dim}_out{feature_dim}.txt")
    if path.exists():
        mats = parse_matrices(path.read_text())
        M, c = mats["M"], mats["c"].ravel()
    else:
        M, c = generate_featurizer_constants(in_dim, feature_dim, seed)
    M.setflags(write=False)
    c.setflags(write=False)
    return M, c


def write_featurizer_asset(in_dim: int, feature_dim: int, seed: int, directory: Path) -> Path:
    M, c = generate_featurizer_constants(in_dim, feature_dim, seed)
    path = Path(directory) / f"featurizer_seed{seed}_in{in_dim}_out{feature_dim}.txt"
    path.write_text(matrix_to_text("M", M) + matrix_to_text("c", c[None, :]))
    return path


def window_at(observations: Sequence[np.ndarray] | np.ndarray, t: int, k: int = WINDOW) -> np.ndarray:
    """The k frames ending at step t; early steps repeat the first frame."""
    idx = [max(i, 0) for i in range(t - k + 1, t + 1)]
    return np.stack([observations[i] for i in idx])


def windows(observations: np.ndarray, k: int = WINDOW) -> np.ndarray:
    """All per-step windows of an episode, shape (T, k, obs_dim)."""
    T = len(observations)
    idx = np.arange(T)[:, None] + np.arange(-k + 1, 1)[None, :]
    return observations[np.maximum(idx, 0)]


def featurize_window(w: np.ndarray, constants: tuple[np.ndarray, np.ndarray] | None = None,
                     seed: int = 7) -> np.ndarray:
    """tanh(M flatten(w) + c). Accepts a single window (k, obs_dim) or a batch (n, k, obs_dim)."""
    w = np.asarray(w, dtype=float)
    batch = w.ndim == 3
    flat = w.reshape(len(w), -1) if batch else w.reshape(1, -1)
    M, c = constants if constants is not None else featurizer_constants(flat.shape[1], FEATURE_DIM, seed)
    out = np.tanh(flat @ M.T + c)
    return out if batch else out[0]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (d, feature_dim), orthonormal rows
    eigenvalues: np.ndarray

    @property
    def d(self) -> int:
        return self.components.shape[0]

    def to_text(self) -> str:
        return (matrix_to_text("mean", self.mean[None, :])
                + matrix_to_text("components", self.components)
                + matrix_to_text("eigenvalues", self.eigenvalues[None, :]))

    @classmethod
    def from_text(cls, text: str) -> "PcaModel":
        m = parse_matrices(text)
        return cls(m["mean"].ravel(), m["components"], m["eigenvalues"].ravel())


def fit_pca(features: np.ndarray, d: int) -> PcaModel:
    X = np.asarray(features, dtype=float)
    n, p = X.shape
    if not 1 <= d <= p:
        raise ValueError(f"need 1 <= d <= feature_dim ({p}), got d={d}")
    if n <= d:
        raise ValueError(f"need more samples than components (n={n}, d={d})")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    comps = evecs[:, order].T
    # largest-magnitude entry of each component is positive
    pivot = np.argmax(np.abs(comps), axis=1)
    comps = comps * np.sign(comps[np.arange(d), pivot])[:, None]
    return PcaModel(mean, comps, np.clip(evals[order], 0.0, None))


def embed(pca: PcaModel, raw: np.ndarray) -> np.ndarray:
    """Project one feature vector or a batch (n, feature_dim)."""
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != pca.mean.shape[0]:
        raise ValueError(f"feature dim {raw.shape[-1]} != PCA dim {pca.mean.shape[0]}")
    return (raw - pca.mean) @ pca.components.T


def project2d(embeddings: np.ndarray, labels: Sequence | None = None):
    E = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if E.shape[1] < 2:
        raise ValueError("need d >= 2 to project to 2-D")
    pts = E[:, :2].copy()
    if labels is None:
        return pts
    if len(labels) != len(pts):
        raise ValueError("labels must align with embeddings")
    return pts, list(labels)


class Encoder:
    """Featurizer + fitted PCA bundled for per-step use by the agent."""

    def __init__(self, pca: PcaModel, k: int = WINDOW, seed: int = 7):
        self.pca, self.k, self.seed = pca, k, seed

    def embed_history(self, history: Sequence[np.ndarray]) -> np.ndarray:
        w = window_at(history, len(history) - 1, self.k)
        return embed(self.pca, featurize_window(w, seed=self.seed))

    def embed_episode(self, observations: np.ndarray) -> np.ndarray:
        return embed(self.pca, featurize_window(windows(observations, self.k), seed=self.seed))

    def raw_features(self, observations: np.ndarray) -> np.ndarray:
        return featurize_window(windows(observations, self.k), seed=self.seed)
