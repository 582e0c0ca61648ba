"""Local residual experts trained with a pairwise preference hinge loss.

An expert maps a context ``[h, a_base]`` to a bounded correction
``delta_max * tanh(mlp(context))`` that is added to the baseline action.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigError, RoutingError, TrainingError
from .indexer import ClusterSet, RoutingDecision, route
from .shiftenv import ID_LABEL, Trajectory
from .textio import fmt, matrix_to_text, parse_kv, parse_matrices, write_csv

GATING_MODES = ("jepa", "none", "global", "coarse", "random")


# --------------------------------------------------------------------------
# preference pairs


class PreferencePair(NamedTuple):
    context: np.ndarray  # [h, a_base]
    a_plus: float
    a_minus: float
    contrast: float

    @property
    def a_base(self) -> float:
        return float(self.context[-1])


@dataclass
class PairSet:
    contexts: np.ndarray
    a_plus: np.ndarray
    a_minus: np.ndarray
    contrast: np.ndarray

    def __len__(self) -> int:
        return len(self.a_plus)

    def __getitem__(self, i) -> PreferencePair:
        return PreferencePair(self.contexts[i], float(self.a_plus[i]), float(self.a_minus[i]), float(self.contrast[i]))

    def take(self, idx) -> "PairSet":
        return PairSet(self.contexts[idx], self.a_plus[idx], self.a_minus[idx], self.contrast[idx])

    @classmethod
    def empty(cls, context_dim: int) -> "PairSet":
        return cls(np.empty((0, context_dim)), np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_pairs(cls, pairs: Sequence[PreferencePair]) -> "PairSet":
        return cls(np.array([p.context for p in pairs], dtype=float),
                   np.array([p.a_plus for p in pairs], dtype=float),
                   np.array([p.a_minus for p in pairs], dtype=float),
                   np.array([p.contrast for p in pairs], dtype=float))

    @classmethod
    def concat(cls, sets: Sequence["PairSet"]) -> "PairSet":
        return cls(np.vstack([s.contexts for s in sets]), np.concatenate([s.a_plus for s in sets]),
                   np.concatenate([s.a_minus for s in sets]), np.concatenate([s.contrast for s in sets]))

    def to_csv(self, path) -> None:
        d = self.contexts.shape[1] - 1
        header = [f"h{i}" for i in range(d)] + ["a_base", "a_plus", "a_minus", "contrast"]
        rows = (list(c) + [p, m, g] for c, p, m, g in zip(self.contexts, self.a_plus, self.a_minus, self.contrast))
        write_csv(path, header, rows)

    @classmethod
    def from_csv(cls, path) -> "PairSet":
        with open(path) as fh:
            ncol = len(fh.readline().strip().split(","))
            body = fh.read()
        if not body.strip():
            return cls.empty(ncol - 3)
        arr = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
        return cls(arr[:, :-3].copy(), arr[:, -3].copy(), arr[:, -2].copy(), arr[:, -1].copy())


def _context(embedding: np.ndarray, base_actions: np.ndarray) -> np.ndarray:
    return np.column_stack([embedding, base_actions])


def _match(low_h: np.ndarray, high_h: np.ndarray) -> np.ndarray:
    """Index of the nearest high-return state for every low-return state."""
    _, idx = cKDTree(high_h).query(low_h, k=1)
    return np.asarray(idx, dtype=int)


def _pairs_from_groups(low, high, trajs, embeddings) -> PairSet:
    """low/high: lists of (episode index, step slice, group return)."""
    hi_h = np.vstack([embeddings[i][sl] for i, sl, _ in high])
    hi_a = np.concatenate([trajs[i].actions[sl] for i, sl, _ in high])
    hi_r = np.concatenate([np.full(len(trajs[i].actions[sl]), r) for i, sl, r in high])
    ctx, ap, am, gap = [], [], [], []
    for i, sl, r in low:
        h = embeddings[i][sl]
        j = _match(h, hi_h)
        ctx.append(_context(h, trajs[i].base_actions[sl]))
        ap.append(hi_a[j])
        am.append(trajs[i].actions[sl])
        gap.append(hi_r[j] - r)
    out = PairSet(np.vstack(ctx), np.concatenate(ap), np.concatenate(am), np.concatenate(gap))
    keep = out.a_plus != out.a_minus
    return out.take(np.flatnonzero(keep))


def mine_pairs_naive(trajs: Sequence[Trajectory], embeddings: Sequence[np.ndarray]) -> PairSet:
    """Episode-level mining: below-median episodes matched against above-median ones."""
    if len(trajs) < 2:
        raise ValueError("need at least two trajectories")
    d = embeddings[0].shape[1] + 1
    returns = np.array([t.episode_return for t in trajs])
    med = np.median(returns)
    full = slice(None)
    low = [(i, full, r) for i, r in enumerate(returns) if r < med]
    high = [(i, full, r) for i, r in enumerate(returns) if r > med]
    if not low or not high:
        return PairSet.empty(d)
    return _pairs_from_groups(low, high, trajs, embeddings)


def segment_returns(traj: Trajectory, seg_len: int) -> np.ndarray:
    n = math.ceil(len(traj.rewards) / seg_len)
    return np.array([traj.rewards[k * seg_len:(k + 1) * seg_len].sum() for k in range(n)])


def mine_segment_candidates(trajs: Sequence[Trajectory], embeddings: Sequence[np.ndarray],
                            seg_len: int = 25) -> PairSet:
    """Segment-level mining: within each time-aligned segment, low segments are matched to high ones."""
    if len(trajs) < 2:
        raise ValueError("need at least two trajectories")
    if seg_len < 1:
        raise ValueError("segment length must be >= 1")
    d = embeddings[0].shape[1] + 1
    seg = np.array([segment_returns(t, seg_len) for t in trajs])
    sets = []
    for k in range(seg.shape[1]):
        sl = slice(k * seg_len, (k + 1) * seg_len)
        med = np.median(seg[:, k])
        low = [(i, sl, r) for i, r in enumerate(seg[:, k]) if r < med]
        high = [(i, sl, r) for i, r in enumerate(seg[:, k]) if r > med]
        if low and high:
            sets.append(_pairs_from_groups(low, high, trajs, embeddings))
    return PairSet.concat(sets) if sets else PairSet.empty(d)


def filter_by_contrast(pairs: PairSet, q: float) -> PairSet:
    """Keep pairs whose contrast is at least the q-quantile (linear interpolation) of all contrasts."""
    if not 0 <= q < 1:
        raise ValueError(f"contrast quantile must lie in [0, 1), got {q}")
    if len(pairs) == 0:
        return pairs
    thr = np.quantile(pairs.contrast, q)
    return pairs.take(np.flatnonzero(pairs.contrast >= thr))


def mine_pairs_harder(trajs: Sequence[Trajectory], embeddings: Sequence[np.ndarray],
                      q: float = 0.7, seg_len: int = 25) -> PairSet:
    if not 0 <= q < 1:
        raise ValueError(f"contrast quantile must lie in [0, 1), got {q}")
    out = filter_by_contrast(mine_segment_candidates(trajs, embeddings, seg_len), q)
    if len(out) == 0:
        warnings.warn("harder-pair mining produced no pairs", RuntimeWarning, stacklevel=2)
    return out


# --------------------------------------------------------------------------
# expert network


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.2
    lr: float = 1e-2
    momentum: float = 0.9
    epochs: int = 200
    batch: int = 64
    hidden: int = 32
    delta_max: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.margin > 0:
            raise ConfigError("margin must be > 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 0 or self.batch < 1 or self.hidden < 1:
            raise ConfigError("epochs >= 0, batch >= 1, hidden >= 1 required")


@dataclass(frozen=True, eq=False)
class ExpertParams:
    W1: np.ndarray  # (hidden, in)
    b1: np.ndarray
    w2: np.ndarray  # (hidden,)
    b2: float
    delta_max: float = 0.5
    cluster_id: str = ""
    # fixed input standardisation, taken from the training contexts
    in_shift: np.ndarray = field(default=None)
    in_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.delta_max > 0:
            raise ValueError("delta_max must be > 0")
        n_in = self.W1.shape[1]
        if self.in_shift is None:
            object.__setattr__(self, "in_shift", np.zeros(n_in))
        if self.in_scale is None:
            object.__setattr__(self, "in_scale", np.ones(n_in))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    def with_flat(self, theta: np.ndarray) -> "ExpertParams":
        h, n = self.W1.shape
        i = 0
        W1 = theta[i:i + h * n].reshape(h, n); i += h * n
        b1 = theta[i:i + h]; i += h
        w2 = theta[i:i + h]; i += h
        return replace(self, W1=W1.copy(), b1=b1.copy(), w2=w2.copy(), b2=float(theta[i]))

    def to_text(self) -> str:
        head = f"# expert v1\ncluster_id = {self.cluster_id}\ndelta_max = {fmt(self.delta_max)}\nb2 = {fmt(self.b2)}\n"
        return (head + matrix_to_text("W1", self.W1) + matrix_to_text("b1", self.b1[None, :])
                + matrix_to_text("w2", self.w2[None, :]) + matrix_to_text("in_shift", self.in_shift[None, :])
                + matrix_to_text("in_scale", self.in_scale[None, :]))

    @classmethod
    def from_text(cls, text: str) -> "ExpertParams":
        kv_part, _, mats = text.partition("\n# W1")
        kv = parse_kv(kv_part)
        m = parse_matrices("# W1" + mats)
        return cls(m["W1"], m["b1"].ravel(), m["w2"].ravel(), float(kv["b2"]), float(kv["delta_max"]),
                   kv["cluster_id"], m["in_shift"].ravel(), m["in_scale"].ravel())


def init_expert(n_in: int, cfg: TrainConfig, cluster_id: str = "",
                contexts: np.ndarray | None = None) -> ExpertParams:
    rng = np.random.default_rng(cfg.seed)
    s1, s2 = 1 / math.sqrt(n_in), 1 / math.sqrt(cfg.hidden)
    W1 = rng.uniform(-s1, s1, size=(cfg.hidden, n_in))
    b1 = rng.uniform(-s1, s1, size=cfg.hidden)
    w2 = rng.uniform(-s2, s2, size=cfg.hidden)
    b2 = float(rng.uniform(-s2, s2))
    shift = scale = None
    if contexts is not None and len(contexts) > 1:
        shift = contexts.mean(axis=0)
        scale = contexts.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
    return ExpertParams(W1, b1, w2, b2, cfg.delta_max, cluster_id, shift, scale)


def _forward(p: ExpertParams, contexts: np.ndarray):
    X = (np.atleast_2d(contexts) - p.in_shift) / p.in_scale
    h1 = np.tanh(X @ p.W1.T + p.b1)
    t2 = np.tanh(h1 @ p.w2 + p.b2)
    return X, h1, t2


def expert_delta(p: ExpertParams, contexts: np.ndarray) -> np.ndarray:
    """Residual correction for a batch of contexts (or a single one)."""
    _, _, t2 = _forward(p, contexts)
    out = p.delta_max * t2
    return out if np.ndim(contexts) == 2 else out[0]


def _loss_terms(p: ExpertParams, pairs: PairSet, m: float):
    X, h1, t2 = _forward(p, pairs.contexts)
    a_tilde = pairs.contexts[:, -1] + p.delta_max * t2
    d_plus = np.abs(a_tilde - pairs.a_plus)
    d_minus = np.abs(a_tilde - pairs.a_minus)
    hinge = m + d_plus - d_minus
    return X, h1, t2, a_tilde, hinge


def batch_loss(p: ExpertParams, pairs: PairSet, m: float) -> float:
    *_, hinge = _loss_terms(p, pairs, m)
    return float(np.mean(np.maximum(hinge, 0.0)))


def batch_loss_grad(p: ExpertParams, pairs: PairSet, m: float) -> tuple[float, np.ndarray]:
    """Mean hinge loss over ``pairs`` and its gradient w.r.t. ``p.flat()``."""
    X, h1, t2, a_tilde, hinge = _loss_terms(p, pairs, m)
    n = len(pairs)
    active = hinge > 0
    # subgradient 0 at the kinks of |.| and of the hinge
    g_a = np.where(active, np.sign(a_tilde - pairs.a_plus) - np.sign(a_tilde - pairs.a_minus), 0.0) / n
    g_z2 = g_a * p.delta_max * (1 - t2 ** 2)
    g_w2 = h1.T @ g_z2
    g_b2 = g_z2.sum()
    g_z1 = np.outer(g_z2, p.w2) * (1 - h1 ** 2)
    g_W1 = g_z1.T @ X
    g_b1 = g_z1.sum(axis=0)
    grad = np.concatenate([g_W1.ravel(), g_b1, g_w2, [g_b2]])
    return float(np.mean(np.maximum(hinge, 0.0))), grad


def pref_loss(expert: ExpertParams, pair: PreferencePair, m: float) -> float:
    if not m > 0:
        raise ValueError("margin must be > 0")
    return batch_loss(expert, PairSet.from_pairs([pair]), m)


def pref_loss_grad(expert: ExpertParams, pair: PreferencePair, m: float) -> np.ndarray:
    return batch_loss_grad(expert, PairSet.from_pairs([pair]), m)[1]


class TrainResult(NamedTuple):
    params: ExpertParams
    loss_curve: np.ndarray  # mean minibatch loss per epoch


def train_expert(pairs: PairSet, cfg: TrainConfig, cluster_id: str = "",
                 init: ExpertParams | None = None) -> TrainResult:
    if len(pairs) == 0:
        raise ValueError("cannot train an expert without preference pairs")
    p = init if init is not None else init_expert(pairs.contexts.shape[1], cfg, cluster_id, pairs.contexts)
    rng = np.random.default_rng([cfg.seed, 1])
    theta = p.flat()
    vel = np.zeros_like(theta)
    curve = []
    n = len(pairs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            loss, g = batch_loss_grad(p, pairs.take(idx), cfg.margin)
            if not math.isfinite(loss) or not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite loss in epoch {epoch} for expert {cluster_id!r}")
            total += loss * len(idx)
            vel = cfg.momentum * vel - cfg.lr * g
            theta = theta + vel
            p = p.with_flat(theta)
        curve.append(total / n)
    return TrainResult(p, np.array(curve))


def preference_accuracy(expert: ExpertParams, pairs: PairSet) -> float:
    if len(pairs) == 0:
        raise ValueError("no pairs")
    a_tilde = pairs.contexts[:, -1] + expert_delta(expert, pairs.contexts)
    return float(np.mean(np.abs(a_tilde - pairs.a_plus) < np.abs(a_tilde - pairs.a_minus)))


# --------------------------------------------------------------------------
# composition and gating


def compose_action(a_base: float, decision: RoutingDecision | str, experts: Mapping[str, ExpertParams],
                   context: np.ndarray | None = None) -> float:
    label = decision if isinstance(decision, str) else decision.assigned
    if label == ID_LABEL:
        return a_base
    try:
        ex = experts[label]
    except KeyError:
        raise RoutingError(f"routed to {label!r} but no expert is attached for it") from None
    a = a_base + float(expert_delta(ex, context))
    return min(1.0, max(-1.0, a))


def gate(mode: str, h: np.ndarray, clusters: ClusterSet, rng: np.random.Generator | None = None,
         designated: str | None = None, candidates: Sequence[str] | None = None) -> RoutingDecision:
    if mode == "jepa":
        return route(h, clusters)
    if mode == "none":
        return RoutingDecision(ID_LABEL, {})
    if mode in ("global", "coarse") and designated is None:
        raise ConfigError(f"gating mode {mode!r} needs a designated expert")
    if mode == "global":
        return RoutingDecision(designated, {})
    if mode == "coarse":
        dec = route(h, clusters)
        return dec if dec.assigned == ID_LABEL else RoutingDecision(designated, dec.distances)
    if mode == "random":
        pool = list(candidates) if candidates is not None else list(clusters.shift_labels)
        if not pool:
            raise ConfigError("random gating needs at least one non-ID expert")
        return RoutingDecision(pool[int(rng.integers(len(pool)))], {})
    raise ConfigError(f"unknown gating mode {mode!r}; expected one of {GATING_MODES}")
