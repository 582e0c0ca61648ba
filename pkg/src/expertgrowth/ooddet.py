"""Density- and distance-based ID rejection, plus ROC/AUC and threshold calibration.

Every detector scores so that higher means more out-of-distribution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import digamma, logsumexp
from scipy.stats import rankdata

EULER_GAMMA = 0.5772156649015329


# --------------------------------------------------------------------------
# Mahalanobis


@dataclass(frozen=True, eq=False)
class MahalanobisModel:
    mean: np.ndarray
    chol: np.ndarray  # lower-triangular factor of cov + lam*I
    lam: float = 1e-3

    def score(self, X: np.ndarray) -> np.ndarray:
        D = np.atleast_2d(X) - self.mean
        Z = solve_triangular(self.chol, D.T, lower=True)
        return np.einsum("ij,ij->j", Z, Z)


def fit_mahalanobis(X: np.ndarray, lam: float = 1e-3) -> MahalanobisModel:
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n <= d:
        raise ValueError(f"need n > d for a covariance estimate (n={n}, d={d}); "
                         "use a larger ridge or reduce the embedding dimension")
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False, ddof=1).reshape(d, d) + lam * np.eye(d)
    return MahalanobisModel(mean, np.linalg.cholesky(cov), lam)


# --------------------------------------------------------------------------
# Gaussian mixture


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)
    loglik: float  # plain data log-likelihood at the final parameters
    history: np.ndarray = field(default=None)  # objective per EM iteration
    n_iter: int = 0
    reinitialised: tuple = ()

    @property
    def K(self) -> int:
        return len(self.weights)

    def component_logpdf(self, X: np.ndarray) -> np.ndarray:
        return _component_logpdf(np.atleast_2d(X), self.means, self.covs)

    def logpdf(self, X: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_logpdf(X) + np.log(self.weights), axis=1)

    def score(self, X: np.ndarray) -> np.ndarray:
        return -self.logpdf(X)


def _component_logpdf(X, means, covs):
    n, d = X.shape
    out = np.empty((n, len(means)))
    for k, (mu, S) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(S)
        Z = solve_triangular(L, (X - mu).T, lower=True)
        logdet = 2 * np.log(np.diag(L)).sum()
        out[:, k] = -0.5 * (np.einsum("ij,ij->j", Z, Z) + logdet + d * math.log(2 * math.pi))
    return out


def kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _m_step(X, R, ridge):
    Nk = R.sum(axis=0)
    n, d = X.shape
    means = (R.T @ X) / Nk[:, None]
    covs = np.empty((len(Nk), d, d))
    for k in range(len(Nk)):
        D = X - means[k]
        covs[k] = (R[:, k, None] * D).T @ D / Nk[k] + (ridge / Nk[k]) * np.eye(d)
    return Nk / n, means, covs


def fit_gmm(X: np.ndarray, K: int, seed: int = 0, eps: float = 1e-6, tol: float = 1e-6,
            max_iter: int = 200) -> GmmModel:
    """EM for a full-covariance mixture.

    The covariance ridge is a fixed prior of total strength ``eps * n / K``,
    so a component holding its fair share of points gets ``eps * I``. EM
    then ascends the penalised log-likelihood exactly, and that objective is
    what ``history`` records.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if K < 1:
        raise ValueError("K must be >= 1")
    if n < K * (d + 1):
        raise ValueError(f"need n >= K*(d+1) points (n={n}, K={K}, d={d})")
    rng = np.random.default_rng(seed)
    ridge = eps * n / K

    centers = kmeans_pp_init(X, K, rng)
    hard = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    R = np.eye(K)[hard]
    # an empty hard cluster gets a uniform responsibility sliver
    R = np.where(R.sum(axis=0) > 0, R, 1.0 / n)
    w, mu, S = _m_step(X, R, ridge)
    history: list[float] = []
    reinit: list[int] = []
    it = 0
    for it in range(1, max_iter + 1):
        logp = _component_logpdf(X, mu, S) + np.log(w)
        norm = logsumexp(logp, axis=1)
        history.append(float(norm.sum()) - 0.5 * ridge * sum(np.trace(np.linalg.inv(Sk)) for Sk in S))
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        R = np.exp(logp - norm[:, None])
        w, mu, S = _m_step(X, R, ridge)
        dead = np.flatnonzero(w < 1e-8)
        if dead.size:
            if any(k in reinit for k in dead):
                raise ValueError(f"GMM component {int(dead[0])} collapsed twice (K={K})")
            for k in dead:
                reinit.append(int(k))
                mu[k] = X[rng.integers(n)]
                S[k] = np.cov(X, rowvar=False).reshape(d, d) + eps * np.eye(d)
                w[k] = 1.0 / n
            w = w / w.sum()
            # the objective restarts after a reinitialisation
            history = []
    ll = float(logsumexp(_component_logpdf(X, mu, S) + np.log(w), axis=1).sum())
    return GmmModel(w, mu, S, ll, np.array(history), it, tuple(reinit))


def gmm_n_params(K: int, d: int) -> int:
    return K - 1 + K * d + K * d * (d + 1) // 2


def gmm_bic(model: GmmModel, X: np.ndarray) -> float:
    X = np.atleast_2d(X)
    n, d = X.shape
    ll = float(model.logpdf(X).sum())
    return -2 * ll + gmm_n_params(model.K, d) * math.log(n)


def fit_gmm_bic(X: np.ndarray, Ks: Sequence[int] = range(1, 9), seed: int = 0) -> GmmModel:
    """Lowest-BIC mixture over ``Ks``; sizes the data cannot support are skipped."""
    n, d = np.shape(X)
    best, best_bic = None, math.inf
    for K in Ks:
        if n < K * (d + 1):
            continue
        m = fit_gmm(X, K, seed)
        b = gmm_bic(m, X)
        if b < best_bic:
            best, best_bic = m, b
    if best is None:
        raise ValueError("no candidate K fits the data size")
    return best


# --------------------------------------------------------------------------
# k nearest neighbours


@dataclass(frozen=True, eq=False)
class KnnModel:
    reference: np.ndarray
    k: int

    def score(self, X: np.ndarray, chunk: int = 32) -> np.ndarray:
        """Exact distance to the k-th nearest reference point (brute force)."""
        X = np.atleast_2d(X)
        out = np.empty(len(X))
        for s in range(0, len(X), chunk):
            diff = X[s:s + chunk, None, :] - self.reference[None, :, :]
            d = np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))
            out[s:s + chunk] = np.partition(d, self.k - 1, axis=1)[:, self.k - 1]
        return out


def fit_knn(X: np.ndarray, k: int) -> KnnModel:
    X = np.asarray(X, dtype=float)
    if not 1 <= k <= len(X):
        raise ValueError(f"k must lie in [1, n={len(X)}], got {k}")
    return KnnModel(X.copy(), k)


# --------------------------------------------------------------------------
# Isolation Forest


def average_path_length(m) -> np.ndarray:
    """c(m) = 2 H(m-1) - 2 (m-1) / m, with c(m) = 0 for m <= 1."""
    m = np.asarray(m, dtype=float)
    out = np.zeros_like(m)
    big = m > 1
    mb = m[big]
    out[big] = 2 * (digamma(mb) + EULER_GAMMA) - 2 * (mb - 1) / mb
    return out


@dataclass(frozen=True, eq=False)
class IsoTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    def path_length(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] < self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.depth[node] + average_path_length(self.size[node])


def _build_tree(X: np.ndarray, max_depth: int, rng: np.random.Generator) -> IsoTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n, dep):
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (size, n), (depth, dep)):
            lst.append(v)
        return len(feature) - 1

    stack = [(np.arange(len(X)), 0, new_node(len(X), 0))]
    while stack:
        idx, dep, node = stack.pop()
        if dep >= max_depth or len(idx) <= 1:
            continue
        lo, hi = X[idx].min(axis=0), X[idx].max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        f = int(splittable[rng.integers(splittable.size)])
        t = float(rng.uniform(lo[f], hi[f]))
        mask = X[idx, f] < t
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, t
        left[node] = new_node(len(li), dep + 1)
        right[node] = new_node(len(ri), dep + 1)
        stack.append((ri, dep + 1, right[node]))
        stack.append((li, dep + 1, left[node]))
    return IsoTree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                   np.array(size), np.array(depth, dtype=float))


@dataclass(frozen=True, eq=False)
class IsoForestModel:
    trees: tuple
    subsample: int

    def score(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        mean_path = np.mean([t.path_length(X) for t in self.trees], axis=0)
        return 2.0 ** (-mean_path / average_path_length(self.subsample))


def fit_isoforest(X: np.ndarray, trees: int = 100, subsample: int = 256, seed: int = 0) -> IsoForestModel:
    X = np.asarray(X, dtype=float)
    if len(X) < 2:
        raise ValueError("need at least 2 points")
    psi = min(subsample, len(X))
    max_depth = math.ceil(math.log2(psi))
    rng = np.random.default_rng(seed)
    forest = []
    for _ in range(trees):
        sub = X[rng.choice(len(X), size=psi, replace=False)]
        forest.append(_build_tree(sub, max_depth, rng))
    return IsoForestModel(tuple(forest), psi)


# --------------------------------------------------------------------------
# evaluation


def roc_auc(id_scores, ood_scores) -> float:
    """P(ood > id) + 0.5 P(ood == id), via the Mann-Whitney rank sum."""
    a = np.asarray(id_scores, dtype=float).ravel()
    b = np.asarray(ood_scores, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2
    return float(u / (a.size * b.size))


def roc_curve(id_scores, ood_scores) -> np.ndarray:
    """(fpr, tpr) points for thresholds at every distinct score, from (0,0) to (1,1)."""
    a = np.sort(np.asarray(id_scores, dtype=float))
    b = np.sort(np.asarray(ood_scores, dtype=float))
    thr = np.unique(np.concatenate([a, b]))[::-1]
    fpr = (a.size - np.searchsorted(a, thr, side="left")) / a.size
    tpr = (b.size - np.searchsorted(b, thr, side="left")) / b.size
    return np.vstack([[0.0, 0.0], np.column_stack([fpr, tpr])])


@dataclass(frozen=True)
class DetectorCalibration:
    threshold: float
    target_fpr: float
    achieved_fpr: float


def calibrate_threshold(id_scores, target_fpr: float = 0.05) -> DetectorCalibration:
    """Smallest ID score whose strict exceedance fraction is <= ``target_fpr``."""
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must lie in (0, 1)")
    s = np.sort(np.asarray(id_scores, dtype=float))
    if s.size == 0:
        raise ValueError("no calibration scores")
    above = (s.size - np.searchsorted(s, s, side="right")) / s.size
    j = int(np.flatnonzero(above <= target_fpr)[0])
    return DetectorCalibration(float(s[j]), target_fpr, float(above[j]))


def tpr_at_threshold(ood_scores, tau: float) -> float:
    b = np.asarray(ood_scores, dtype=float)
    if b.size == 0:
        raise ValueError("no scores")
    return float(np.mean(b > tau))
