"""Nominal-model baseline: system identification plus random-shooting MPC."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ConfigError, TrainingError
from .shiftenv import (
    Decision, EnvParams, EnvState, EpisodeRngs, Trajectory, reward_fn,
    target_velocity, velocity_update,
)
from .textio import kv_to_text, parse_kv

COEFFICIENT_NAMES = ("gear/mass", "friction/mass", "gravity/mass", "damping/mass")


@dataclass(frozen=True)
class NominalModel:
    mass_hat: float
    gravity_hat: float
    gear_hat: float
    friction_hat: float
    damping_hat: float

    def __post_init__(self):
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if not (math.isfinite(val) and val > 0):
                raise ValueError(f"NominalModel.{f.name} must be positive and finite, got {val}")

    @classmethod
    def from_params(cls, p: EnvParams) -> "NominalModel":
        return cls(p.mass, p.gravity, p.gear, p.friction, p.damping)

    @property
    def coefficients(self) -> np.ndarray:
        m = self.mass_hat
        return np.array([self.gear_hat / m, self.friction_hat / m, self.gravity_hat / m, self.damping_hat / m])

    @classmethod
    def from_coefficients(cls, theta: Sequence[float], gear_ref: float) -> "NominalModel":
        """Only ratios are identifiable; the actuator gain is taken as known (``gear_ref``)."""
        theta = np.asarray(theta, dtype=float)
        if np.any(theta <= 0) or not np.all(np.isfinite(theta)):
            bad = [n for n, t in zip(COEFFICIENT_NAMES, theta) if not (t > 0 and math.isfinite(t))]
            raise ValueError(f"identified coefficients must be positive: {bad}")
        mass = gear_ref / theta[0]
        return cls(mass_hat=mass, gravity_hat=theta[2] * mass, gear_hat=gear_ref,
                   friction_hat=theta[1] * mass, damping_hat=theta[3] * mass)

    def predict_velocity(self, x, v, a, dt):
        return velocity_update(x, v, a, self.mass_hat, self.gravity_hat, self.gear_hat,
                               self.friction_hat, self.damping_hat, dt)

    def to_text(self) -> str:
        return "# nominal model v1\n" + kv_to_text(dataclasses.asdict(self))

    @classmethod
    def from_text(cls, text: str) -> "NominalModel":
        kv = parse_kv(text)
        return cls(**{f.name: float(kv[f.name]) for f in dataclasses.fields(cls)})


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 128
    plan_horizon: int = 12
    action_smoothing: float = 0.5
    seed_offset: int = 0

    def __post_init__(self):
        if self.n_candidates < 1 or self.plan_horizon < 1:
            raise ConfigError("n_candidates and plan_horizon must be >= 1")
        if not 0 <= self.action_smoothing < 1:
            raise ConfigError("action_smoothing must lie in [0, 1)")


# --------------------------------------------------------------------------
# system identification


def regression_data(trajectories: Sequence[Trajectory], dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix for one-step velocity prediction.

    Rows are ``[a, -v, -sin x, -v|v|]`` and targets ``(v' - v) / dt`` so the
    least-squares solution is the coefficient vector (gear, friction,
    gravity, damping) / mass.
    """
    feats, ys = [], []
    for tr in trajectories:
        x, v = tr.states[:, 0], tr.states[:, 1]
        a = tr.actions
        if len(a) < 2:
            continue
        feats.append(np.column_stack([a[:-1], -v[:-1], -np.sin(x[:-1]), -v[:-1] * np.abs(v[:-1])]))
        ys.append((v[1:] - v[:-1]) / dt)
    if not feats:
        raise ValueError("need at least one trajectory with >= 2 steps")
    return np.vstack(feats), np.concatenate(ys)


def _deficient_column(Phi: np.ndarray, tol: float) -> int | None:
    scale = np.linalg.norm(Phi, axis=0)
    if np.any(scale == 0):
        return int(np.argmin(scale))
    Z = Phi / scale
    s = np.linalg.svd(Z, compute_uv=False)
    if s[-1] > tol * s[0]:
        return None
    # name the first column that is (numerically) in the span of the others
    for j in range(Z.shape[1]):
        others = np.delete(Z, j, axis=1)
        coef, *_ = np.linalg.lstsq(others, Z[:, j], rcond=None)
        if np.linalg.norm(others @ coef - Z[:, j]) < math.sqrt(tol):
            return j
    return Z.shape[1] - 1


def fit_nominal_model(trajectories: Sequence[Trajectory], params: EnvParams,
                      gear_ref: float | None = None, tol: float = 1e-10) -> NominalModel:
    Phi, y = regression_data(trajectories, params.dt)
    j = _deficient_column(Phi, tol)
    if j is not None:
        raise ValueError(f"rank-deficient regression: coefficient {COEFFICIENT_NAMES[j]!r} is not identifiable")
    theta, *_ = np.linalg.lstsq(Phi, y, rcond=None)
    return NominalModel.from_coefficients(theta, params.gear if gear_ref is None else gear_ref)


def one_step_mse(model: NominalModel, trajectories: Sequence[Trajectory], dt: float) -> float:
    Phi, y = regression_data(trajectories, dt)
    return float(np.mean((Phi @ model.coefficients - y) ** 2))


def finetune_nominal_model(model: NominalModel, shifted: Sequence[Trajectory], steps: int, lr: float,
                           dt: float) -> NominalModel:
    """Plain gradient descent on the one-step squared error using shifted data only."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    Phi, y = regression_data(shifted, dt)
    theta = model.coefficients.copy()
    n = len(y)
    for i in range(steps):
        resid = Phi @ theta - y
        loss = 0.5 * float(resid @ resid) / n
        if not math.isfinite(loss):
            raise TrainingError(f"fine-tuning loss became non-finite at step {i} (lr={lr})")
        theta = theta - lr * (Phi.T @ resid) / n
    if not np.all(np.isfinite(theta)):
        raise TrainingError("fine-tuning produced non-finite coefficients")
    return NominalModel.from_coefficients(theta, model.gear_hat)


# --------------------------------------------------------------------------
# planning


def sample_candidates(cfg: PlannerConfig, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(-1.0, 1.0, size=(cfg.n_candidates, cfg.plan_horizon))
    a = cfg.action_smoothing
    # s_j = a * s_{j-1} + (1 - a) * u_j, starting from rest
    return lfilter([1.0 - a], [1.0, -a], u, axis=1)


def score_sequences(model: NominalModel, state: EnvState, seqs: np.ndarray, task: EnvParams) -> np.ndarray:
    """Predicted cumulative reward of each action sequence under the internal model."""
    n, H = seqs.shape
    x = np.full(n, state.x)
    v = np.full(n, state.v)
    total = np.zeros(n)
    targets = target_velocity(state.t + np.arange(H), task)
    for j in range(H):
        v = model.predict_velocity(x, v, seqs[:, j], task.dt)
        x = x + task.dt * v
        total += reward_fn(v, targets[j], task.reward_scale)
    return total


def plan_action(model: NominalModel, state: EnvState, cfg: PlannerConfig, rng: np.random.Generator,
                task: EnvParams = EnvParams()) -> float:
    seqs = sample_candidates(cfg, rng)
    scores = score_sequences(model, state, seqs, task)
    return float(np.clip(seqs[int(np.argmax(scores)), 0], -1.0, 1.0))


class Planner:
    """Baseline controller: re-plans from the true state at every step."""

    def __init__(self, model: NominalModel, cfg: PlannerConfig = PlannerConfig(), task: EnvParams = EnvParams()):
        self.model, self.cfg, self.task = model, cfg, task

    def __call__(self, state: EnvState, history, rngs: EpisodeRngs) -> float:
        return plan_action(self.model, state, self.cfg, rngs.planner, self.task)


class Explorer:
    """Wraps a controller with blockwise-constant uniform action offsets (data collection)."""

    def __init__(self, base, scale: float, block: int = 10):
        self.base, self.scale, self.block = base, scale, block
        self._offset = 0.0

    def __call__(self, state: EnvState, history, rngs: EpisodeRngs) -> Decision:
        a_base = float(self.base(state, history, rngs))
        if state.t % self.block == 0:
            self._offset = float(rngs.explore.uniform(-self.scale, self.scale))
        return Decision(a_base + self._offset, base_action=a_base)


class RandomActuation:
    """Smoothed random actions, used to excite the plant for identification."""

    def __init__(self, smoothing: float = 0.8):
        self.smoothing = smoothing
        self._a = 0.0

    def __call__(self, state: EnvState, history, rngs: EpisodeRngs) -> float:
        if state.t == 0:
            self._a = 0.0
        self._a = self.smoothing * self._a + (1 - self.smoothing) * float(rngs.explore.uniform(-1, 1))
        return self._a
