"""Experiment configuration: one frozen dataclass tree loaded from TOML."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .controller import PlannerConfig
from .errors import ConfigError
from .agent import LATCH_MODES
from .expert import GATING_MODES, TrainConfig
from .shiftenv import ID_LABEL, EnvParams, ShiftSpec
from .textio import dump_json, sha256_text

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class SeedBlock:
    base: int
    count: int = 30

    def __post_init__(self):
        if self.base < 0 or self.count < 1:
            raise ConfigError(f"invalid seed block base={self.base} count={self.count}")

    @property
    def seeds(self) -> range:
        return range(self.base, self.base + self.count)

    def overlaps(self, other: "SeedBlock") -> bool:
        return self.base < other.base + other.count and other.base < self.base + self.count


@dataclass(frozen=True)
class ShiftsConfig:
    # routed jointly through one ClusterSet; the main result
    train: tuple[str, ...] = ("torso_mass_x3", "torso_mass_x5")
    # each gets its own expert and a two-way (ID vs shift) cluster set
    single: tuple[str, ...] = ("gear_x0.3", "gravity_x5")
    # detector-only: never used to fit anything
    novel: tuple[str, ...] = ("torso_mass_x4", "torso_mass_x6", "torso_mass_x8")
    # centroid-distance table only
    unseen: tuple[str, ...] = ("torso_mass_x2", "friction_x2", "damping_x2")

    def all_labels(self) -> tuple[str, ...]:
        return (*self.train, *self.single, *self.novel, *self.unseen)


@dataclass(frozen=True)
class CollectConfig:
    sysid_episodes: int = 10
    id_episodes: int = 50
    shift_episodes: int = 40
    explore_scale: float = 0.3
    explore_block: int = 10
    detect_episodes: int = 20


@dataclass(frozen=True)
class PairConfig:
    contrast_quantile: float = 0.7
    segment_len: int = 25


@dataclass(frozen=True)
class GatingConfig:
    mode: str = "jepa"
    # "reject": once a step leaves ID the episode never returns to it; see ExpertAgent
    latch: str = "reject"
    # fraction of ID collection steps that must still route to ID after calibrating id_bias
    id_keep: float = 1.0


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    lr: float = 0.5


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 10_000
    seed: int = 42


@dataclass(frozen=True)
class DetectConfig:
    target_fpr: float = 0.05
    mahalanobis_lambda: float = 1e-3
    gmm_k: int = 16
    joint_gmm_ks: tuple[int, ...] = (3, 8)
    bic_ks: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    knn_ks: tuple[int, ...] = (10, 50)
    iso_trees: int = 100
    iso_subsample: int = 256
    # reference points kept for kNN; the ID set is strided down to at most this many
    knn_max_reference: int = 4000
    seed: int = 0


@dataclass(frozen=True)
class SuitabilityConfig:
    max_cv: float = 0.4
    degradation: float = 0.6


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvParams = EnvParams()
    shifts: ShiftsConfig = ShiftsConfig()
    # at 16 the Mahalanobis TPR on mass x5 stays below 0.8; at 32 the mass x3 gain loses significance
    pca_dim: int = 24
    window: int = 3
    featurizer_seed: int = 7
    planner: PlannerConfig = PlannerConfig()
    collect: CollectConfig = CollectConfig()
    pairs: PairConfig = PairConfig()
    # tighter correction bound than the 0.5 expert default: experts run closed loop on states they never saw
    train: TrainConfig = TrainConfig(seed=1, delta_max=0.2)
    gating: GatingConfig = GatingConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    first: SeedBlock = SeedBlock(109000, 30)
    second: SeedBlock | None = SeedBlock(200000, 30)
    bootstrap: BootstrapConfig = BootstrapConfig()
    detect: DetectConfig = DetectConfig()
    suitability: SuitabilityConfig = SuitabilityConfig()
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.second is not None and self.first.overlaps(self.second):
            raise ConfigError("evaluation seed blocks overlap")
        for block in filter(None, (self.first, self.second)):
            for lo, hi, what in RESERVED_RANGES:
                if block.base < hi and lo < block.base + block.count:
                    raise ConfigError(f"evaluation block {block.base} overlaps the reserved {what} range")
        if self.gating.mode not in GATING_MODES:
            raise ConfigError(f"unknown gating mode {self.gating.mode!r}")
        if self.gating.latch not in LATCH_MODES:
            raise ConfigError(f"gating.latch must be one of {LATCH_MODES}, got {self.gating.latch!r}")
        if not 0 < self.gating.id_keep <= 1:
            raise ConfigError("gating.id_keep must lie in (0, 1]")
        if not 1 <= self.pca_dim <= 128:
            raise ConfigError("pca_dim must lie in [1, 128]")
        labels = self.shifts.all_labels()
        if len(set(labels)) != len(labels):
            raise ConfigError("a shift label appears in more than one shift list")
        for lab in labels:
            if ShiftSpec.parse(lab).label == ID_LABEL:
                raise ConfigError("ID cannot be listed as a shift")
        if self.shifts.novel and not self.shifts.train:
            raise ConfigError("novel shifts need at least one trained shift to compare against")

    def shift_specs(self, which: str) -> list[ShiftSpec]:
        return [ShiftSpec.parse(s) for s in getattr(self.shifts, which)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["env"] = self.env.to_dict()
        return d

    def hash(self) -> str:
        """Content hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        return sha256_text(dump_json(d))


# (low, high, purpose); evaluation blocks must stay clear of all of them
RESERVED_RANGES = (
    (300000, 310000, "system identification"),
    (500000, 600000, "collection"),
    (600000, 700000, "detection"),
    (700000, 800000, "unseen-shift"),
)
SYSID_BASE = 300000
COLLECT_BASE = 500000
DETECT_BASE = 600000
UNSEEN_BASE = 700000
LABEL_STRIDE = 1000


def _build(cls, data: dict[str, Any], where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from None


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    sections = {
        "shifts": ShiftsConfig, "planner": PlannerConfig, "collect": CollectConfig,
        "pairs": PairConfig, "train": TrainConfig, "gating": GatingConfig,
        "finetune": FinetuneConfig, "bootstrap": BootstrapConfig, "detect": DetectConfig,
        "suitability": SuitabilityConfig,
    }
    kwargs: dict[str, Any] = {}
    if "env" in data:
        try:
            kwargs["env"] = EnvParams.from_dict(data.pop("env"))
        except TypeError as exc:
            raise ConfigError(f"[env]: {exc}") from None
    for name, cls in sections.items():
        if name in data:
            kwargs[name] = _build(cls, data.pop(name), name)
    for name in ("first", "second"):
        if name in data:
            block = data.pop(name)
            kwargs[name] = None if block in (None, {}, False) else _build(SeedBlock, block, name)
    for name in ("pca_dim", "window", "featurizer_seed", "out_dir"):
        if name in data:
            kwargs[name] = data.pop(name)
    if data:
        raise ConfigError(f"unknown top-level keys: {sorted(data)}")
    return ExperimentConfig(**kwargs)


def load_config(path: Path | str | None = None) -> ExperimentConfig:
    """Load a TOML config; ``None`` loads the packaged default."""
    try:
        if path is None:
            text = resources.files("expertgrowth").joinpath("default.toml").read_text()
        else:
            text = Path(path).read_text()
        data = tomllib.loads(text)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return config_from_dict(data)
