"""Seedable 1-D cart-on-a-hill tracking task with multiplicative dynamics shifts.

The cart has position ``x`` on a sinusoidal slope and velocity ``v``. Each
step the controller applies a bounded force command and is rewarded for
tracking a piecewise-constant target velocity. Observations are a fixed
random sinusoidal lift of ``(x, v)`` plus Gaussian noise, standing in for
pixels.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, EpisodeError
from .textio import dump_json, matrix_to_text, parse_matrices

SHIFT_FIELDS = {
    "torso_mass": "mass",
    "gravity": "gravity",
    "gear": "gear",
    "friction": "friction",
    "damping": "damping",
}

ID_LABEL = "ID"


@dataclass(frozen=True)
class EnvParams:
    mass: float = 1.0
    gravity: float = 0.12
    gear: float = 1.2
    friction: float = 0.1
    damping: float = 0.05
    dt: float = 0.05
    horizon: int = 200
    obs_dim: int = 32
    obs_noise_std: float = 0.01
    # (first step, target velocity) pairs; the last entry holds to the end
    target_profile: tuple[tuple[int, float], ...] = ((0, 0.3), (50, 0.6), (100, 0.3), (150, 0.5))
    # per-step reward is clamp(1 - |v' - target| / reward_scale, 0, 1)
    reward_scale: float = 0.15
    init_x_range: float = 0.1
    obs_seed: int = 2024

    def __post_init__(self):
        for name in ("mass", "gravity", "gear", "friction", "damping", "dt", "reward_scale"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0):
                raise ConfigError(f"EnvParams.{name} must be finite and > 0, got {val}")
        if not 0 < self.dt < 1:
            raise ConfigError(f"dt must lie in (0, 1), got {self.dt}")
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1, got {self.horizon}")
        if self.obs_dim < 1 or self.obs_noise_std < 0 or self.init_x_range < 0:
            raise ConfigError("obs_dim >= 1, obs_noise_std >= 0 and init_x_range >= 0 required")
        starts = [s for s, _ in self.target_profile]
        if not starts or starts[0] != 0 or starts != sorted(starts):
            raise ConfigError("target_profile must start at step 0 and be sorted")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["target_profile"] = [list(p) for p in self.target_profile]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvParams":
        d = dict(d)
        if "target_profile" in d:
            d["target_profile"] = tuple((int(s), float(v)) for s, v in d["target_profile"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown env keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ShiftSpec:
    family: str = "id"
    factor: float = 1.0

    def __post_init__(self):
        if self.family != "id" and self.family not in SHIFT_FIELDS:
            raise ConfigError(f"unknown shift family {self.family!r}")
        if not (self.factor > 0 and math.isfinite(self.factor)):
            raise ConfigError(f"shift factor must be > 0, got {self.factor}")
        if self.family == "id" and self.factor != 1.0:
            raise ConfigError("the id family requires factor 1")

    @property
    def label(self) -> str:
        if self.family == "id":
            return ID_LABEL
        return f"{self.family}_x{self.factor:g}"

    @classmethod
    def parse(cls, text: str) -> "ShiftSpec":
        """Parse a label such as ``torso_mass_x5`` or ``ID``."""
        if text in (ID_LABEL, "id"):
            return cls()
        family, sep, factor = text.rpartition("_x")
        if not sep:
            raise ConfigError(f"cannot parse shift label {text!r}")
        return cls(family, float(factor))


ID_SHIFT = ShiftSpec()


def apply_shift(base: EnvParams, spec: ShiftSpec) -> EnvParams:
    if spec.family == "id":
        return base
    try:
        name = SHIFT_FIELDS[spec.family]
    except KeyError:
        raise ConfigError(f"unknown shift family {spec.family!r}") from None
    return dataclasses.replace(base, **{name: getattr(base, name) * spec.factor})


@dataclass(frozen=True)
class EnvState:
    x: float
    v: float
    t: int = 0


def target_velocity(t, params: EnvParams):
    """Target velocity at step(s) ``t``; steps past the horizon hold the last value."""
    starts = np.array([s for s, _ in params.target_profile])
    values = np.array([v for _, v in params.target_profile])
    idx = np.searchsorted(starts, np.asarray(t), side="right") - 1
    return values[idx]


def velocity_update(x, v, a, mass, gravity, gear, friction, damping, dt):
    """One explicit-Euler velocity update; broadcasts over arrays.

    Damping is quadratic (``v|v|``) so that it stays separable from the
    viscous friction term when the coefficients are identified from data.
    """
    force = gear * a - friction * v - gravity * np.sin(x) - damping * v * np.abs(v)
    return v + dt * force / mass


def reward_fn(v_next, target, scale):
    return np.clip(1.0 - np.abs(v_next - target) / scale, 0.0, 1.0)


def clip_action(a: float) -> tuple[float, bool]:
    if a > 1.0:
        return 1.0, True
    if a < -1.0:
        return -1.0, True
    return float(a), False


def step(state: EnvState, action: float, params: EnvParams) -> tuple[EnvState, float]:
    if state.t >= params.horizon:
        raise EpisodeError(f"step called at t={state.t} >= horizon={params.horizon}")
    a, _ = clip_action(action)
    v2 = float(
        velocity_update(
            state.x, state.v, a, params.mass, params.gravity, params.gear,
            params.friction, params.damping, params.dt,
        )
    )
    x2 = state.x + params.dt * v2
    r = float(reward_fn(v2, target_velocity(state.t, params), params.reward_scale))
    return EnvState(x2, v2, state.t + 1), r


# --------------------------------------------------------------------------
# observation model


def generate_observation_constants(obs_dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(obs_dim, 3)) * np.array([1.0, 4.0, 1.0])
    b = rng.uniform(-np.pi, np.pi, size=obs_dim)
    return W, b


def _asset_path(name: str) -> Path:
    return Path(str(resources.files("expertgrowth") / "assets" / name))


@functools.lru_cache(maxsize=None)
def observation_constants(obs_dim: int = 32, seed: int = 2024) -> tuple[np.ndarray, np.ndarray]:
    """Frozen (W, b). Loaded from the shipped asset when it matches, else generated."""
    path = _asset_path(f"observation_seed{seed}_dim{obs_dim}.txt")
    if path.exists():
        mats = parse_matrices(path.read_text())
        W, b = mats["W"], mats["b"].ravel()
    else:
        W, b = generate_observation_constants(obs_dim, seed)
    W.setflags(write=False)
    b.setflags(write=False)
    return W, b


def write_observation_asset(obs_dim: int, seed: int, directory: Path) -> Path:
    W, b = generate_observation_constants(obs_dim, seed)
    path = Path(directory) / f"observation_seed{seed}_dim{obs_dim}.txt"
    path.write_text(matrix_to_text("W", W) + matrix_to_text("b", b[None, :]))
    return path


def observe(state: EnvState, params: EnvParams, rng: np.random.Generator,
            constants: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    W, b = constants if constants is not None else observation_constants(params.obs_dim, params.obs_seed)
    clean = np.sin(W @ np.array([state.x, state.v, 1.0]) + b)
    return clean + rng.normal(0.0, params.obs_noise_std, size=clean.shape)


# --------------------------------------------------------------------------
# episodes


class EpisodeRngs:
    """Independent per-episode random streams derived from one seed.

    Keeping the planner, gating and observation-noise streams separate is
    what makes a fully ID-routed episode bit-identical to the baseline.
    """

    NAMES = ("init", "obs", "planner", "gate", "explore")

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError(f"seed must be >= 0, got {seed}")
        self.seed = seed
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        for name, ss in zip(self.NAMES, children):
            setattr(self, name, np.random.Generator(np.random.PCG64(ss)))


class Decision(NamedTuple):
    action: float
    base_action: float | None = None
    route: str | None = None


Controller = Callable[[EnvState, Sequence[np.ndarray], EpisodeRngs], "float | Decision"]


@dataclass
class Trajectory:
    observations: np.ndarray  # (T, obs_dim), recorded before each action
    actions: np.ndarray  # executed (clamped) actions
    rewards: np.ndarray
    episode_return: float
    seed: int
    shift: ShiftSpec
    states: np.ndarray = field(default=None)  # (T, 2) x, v before each action
    base_actions: np.ndarray = field(default=None)
    routes: list = field(default=None)
    clamped: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.actions)

    def to_jsonl(self) -> str:
        head = {
            "kind": "episode", "seed": self.seed, "shift": self.shift.label,
            "steps": len(self), "episode_return": self.episode_return,
        }
        lines = [dump_json(head)]
        for t in range(len(self)):
            rec = {
                "t": t,
                "x": float(self.states[t, 0]), "v": float(self.states[t, 1]),
                "obs": [float(o) for o in self.observations[t]],
                "action": float(self.actions[t]),
                "base_action": float(self.base_actions[t]),
                "reward": float(self.rewards[t]),
                "route": self.routes[t],
                "clamped": bool(self.clamped[t]),
            }
            lines.append(dump_json(rec))
        return "\n".join(lines) + "\n"


def write_trajectories(path: Path | str, trajs: Iterable[Trajectory]) -> None:
    with open(path, "w") as fh:
        for tr in trajs:
            fh.write(tr.to_jsonl())


def read_trajectories(path: Path | str) -> list[Trajectory]:
    out: list[Trajectory] = []
    head, recs = None, []

    def flush():
        if head is None:
            return
        out.append(Trajectory(
            observations=np.array([r["obs"] for r in recs], dtype=float),
            actions=np.array([r["action"] for r in recs], dtype=float),
            rewards=np.array([r["reward"] for r in recs], dtype=float),
            episode_return=float(head["episode_return"]),
            seed=int(head["seed"]),
            shift=ShiftSpec.parse(head["shift"]),
            states=np.array([[r["x"], r["v"]] for r in recs], dtype=float),
            base_actions=np.array([r["base_action"] for r in recs], dtype=float),
            routes=[r["route"] for r in recs],
            clamped=np.array([r["clamped"] for r in recs], dtype=bool),
        ))

    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "episode":
                flush()
                head, recs = rec, []
            else:
                recs.append(rec)
    flush()
    return out


def initial_state(params: EnvParams, rng: np.random.Generator) -> EnvState:
    return EnvState(float(rng.uniform(-params.init_x_range, params.init_x_range)), 0.0, 0)


def run_episode(controller: Controller, params: EnvParams, seed: int,
                shift: ShiftSpec = ID_SHIFT) -> Trajectory:
    """Roll out one full episode. ``params`` should already have the shift applied."""
    rngs = EpisodeRngs(seed)
    state = initial_state(params, rngs.init)
    T = params.horizon
    obs = np.empty((T, params.obs_dim))
    states = np.empty((T, 2))
    actions = np.empty(T)
    base = np.empty(T)
    rewards = np.empty(T)
    clamped = np.zeros(T, dtype=bool)
    routes: list = [None] * T
    history: list[np.ndarray] = []
    for t in range(T):
        o = observe(state, params, rngs.obs)
        obs[t] = o
        history.append(o)
        states[t] = (state.x, state.v)
        out = controller(state, history, rngs)
        dec = out if isinstance(out, Decision) else Decision(float(out))
        if not math.isfinite(dec.action):
            raise EpisodeError(f"controller returned non-finite action {dec.action} at t={t} (seed {seed})")
        a, clamped[t] = clip_action(dec.action)
        actions[t] = a
        base[t] = a if dec.base_action is None else dec.base_action
        routes[t] = dec.route
        state, rewards[t] = step(state, a, params)
    return Trajectory(obs, actions, rewards, float(rewards.sum()), seed, shift,
                      states=states, base_actions=base, routes=routes, clamped=clamped)


def zero_controller(state: EnvState, history, rngs) -> float:
    return 0.0
