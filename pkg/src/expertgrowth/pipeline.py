"""Stage-by-stage experiment runner with a hashed manifest.

Every stage writes plain-text artifacts into ``<out>/<stage>/`` and records
their SHA-256 in ``<out>/manifest.json`` together with a stage key. The key
hashes the config and the artifact hashes of the stage's inputs, so an
unchanged re-run skips everything and a forced stage that reproduces its old
outputs does not invalidate anything downstream.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .agent import ExpertAgent
from .config import (COLLECT_BASE, DETECT_BASE, LABEL_STRIDE, RESERVED_RANGES, SYSID_BASE,
                     UNSEEN_BASE, ExperimentConfig)
from .controller import (Explorer, NominalModel, Planner, RandomActuation, finetune_nominal_model,
                         fit_nominal_model, one_step_mse)
from .encoder import Encoder, PcaModel, fit_pca, project2d
from .errors import ConfigError, StageError
from .expert import (ExpertParams, PairSet, mine_pairs_harder, mine_pairs_naive, preference_accuracy,
                     train_expert)
from .geomdiag import centroid_cosine_matrix, rank_dims, shift_suitability, spread_ratio
from .indexer import (ClusterSet, calibrate_id_bias, centroid_distance_table, compute_centroid,
                      routing_stats)
from .ooddet import (calibrate_threshold, fit_gmm, fit_gmm_bic, fit_isoforest, fit_knn, fit_mahalanobis,
                     roc_auc, roc_curve, tpr_at_threshold)
from .shiftenv import (ID_LABEL, ID_SHIFT, EnvParams, ShiftSpec, Trajectory, apply_shift, read_trajectories,
                       run_episode, write_trajectories)
from .textio import dump_json, read_csv, sha256_file, sha256_text, write_csv

STAGES = ("train-baseline", "collect", "fit-encoder", "build-centroids", "mine-pairs", "train-experts",
          "evaluate", "detect", "diagnose", "report")

UPSTREAM = {
    "train-baseline": (),
    "collect": ("train-baseline",),
    "fit-encoder": ("collect",),
    "build-centroids": ("collect", "fit-encoder"),
    "mine-pairs": ("collect", "fit-encoder"),
    "train-experts": ("train-baseline", "collect", "mine-pairs"),
    "evaluate": ("train-baseline", "fit-encoder", "build-centroids", "train-experts"),
    "detect": ("collect", "fit-encoder"),
    "diagnose": ("collect", "fit-encoder", "build-centroids", "evaluate"),
    "report": ("build-centroids", "train-experts", "evaluate", "detect", "diagnose"),
}

MANIFEST = "manifest.json"
POOLED = "pooled"
EXPERT_METHODS = ("naive", "harder")
# second-block evaluation is only needed for the methods that appear in the reuse tables
ABLATIONS = ("finetune", "global", "coarse", "random")


# --------------------------------------------------------------------------
# manifest


@dataclass
class StageRecord:
    key: str
    artifacts: dict[str, str]  # path relative to the run dir -> sha256


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = __version__
    stages: dict[str, StageRecord] = field(default_factory=dict)
    seed_ranges: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "config_hash": self.config_hash,
            "tool_version": self.tool_version,
            "seed_ranges": self.seed_ranges,
            "stages": {k: {"key": v.key, "artifacts": dict(sorted(v.artifacts.items()))}
                       for k, v in self.stages.items()},
        }
        return json.dumps(d, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        stages = {k: StageRecord(v["key"], dict(v["artifacts"])) for k, v in d.get("stages", {}).items()}
        return cls(d["config_hash"], d.get("tool_version", ""), stages, d.get("seed_ranges", {}))

    def verify(self, root: Path, stage: str) -> bool:
        rec = self.stages.get(stage)
        if rec is None:
            return False
        for rel, digest in rec.artifacts.items():
            p = root / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True


def load_manifest(root: Path) -> RunManifest | None:
    p = Path(root) / MANIFEST
    return RunManifest.from_json(p.read_text()) if p.exists() else None


# --------------------------------------------------------------------------
# episode fan-out


def _episode_job(args) -> Trajectory:
    controller, params, seed, shift = args
    return run_episode(controller, params, seed, shift)


class EpisodeRunner:
    """Runs batches of episodes inline or on a process pool; output order follows the seed list."""

    def __init__(self, jobs: int = 1):
        if jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        self.jobs = jobs
        self._pool: ProcessPoolExecutor | None = None

    def run(self, controller, params: EnvParams, seeds: Sequence[int], shift: ShiftSpec) -> list[Trajectory]:
        seeds = list(seeds)
        if self.jobs == 1 or len(seeds) < 2:
            return [run_episode(controller, params, s, shift) for s in seeds]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(self.jobs)
        work = [(controller, params, s, shift) for s in seeds]
        chunk = max(1, len(work) // (4 * self.jobs))
        return list(self._pool.map(_episode_job, work, chunksize=chunk))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


# --------------------------------------------------------------------------
# helpers


def _returns(trajs: Sequence[Trajectory]) -> np.ndarray:
    return np.array([t.episode_return for t in trajs])


def _activation(traj: Trajectory) -> float:
    if traj.routes is None or traj.routes[0] is None:
        return 0.0
    return float(np.mean([r != ID_LABEL for r in traj.routes]))


def _identical(a: Trajectory, b: Trajectory) -> bool:
    return (np.array_equal(a.observations, b.observations) and np.array_equal(a.actions, b.actions)
            and np.array_equal(a.rewards, b.rewards) and np.array_equal(a.states, b.states))


def _stride(X: np.ndarray, limit: int) -> np.ndarray:
    if len(X) <= limit:
        return X
    step = math.ceil(len(X) / limit)
    return X[::step]


def _merged_labels(labels: Sequence[str]) -> str:
    return "+".join(labels)


# --------------------------------------------------------------------------
# pipeline


class Pipeline:
    def __init__(self, cfg: ExperimentConfig, out_dir: Path | str | None = None, jobs: int = 1,
                 log: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.root = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.runner = EpisodeRunner(jobs)
        self.log = log or (lambda msg: None)
        self.config_hash = cfg.hash()
        self._cache: dict[str, object] = {}
        self._current: dict[str, bool] = {}
        self.manifest = self._open_manifest()

    # ---- bookkeeping

    def _open_manifest(self) -> RunManifest:
        old = load_manifest(self.root)
        if old is not None and old.config_hash == self.config_hash:
            return old
        m = RunManifest(self.config_hash)
        c = self.cfg.collect
        m.seed_ranges = {
            "first": [self.cfg.first.base, self.cfg.first.base + self.cfg.first.count],
            "sysid": [SYSID_BASE, SYSID_BASE + c.sysid_episodes],
            "collection": [COLLECT_BASE, RESERVED_RANGES[1][1]],
            "detection": [DETECT_BASE, RESERVED_RANGES[2][1]],
            "unseen": [UNSEEN_BASE, RESERVED_RANGES[3][1]],
        }
        if self.cfg.second is not None:
            m.seed_ranges["second"] = [self.cfg.second.base, self.cfg.second.base + self.cfg.second.count]
        return m

    def _save_manifest(self):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / MANIFEST).write_text(self.manifest.to_json())

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def stage_key(self, stage: str) -> str:
        up = {u: self.manifest.stages[u].artifacts for u in UPSTREAM[stage]}
        return sha256_text(dump_json({"config": self.config_hash, "stage": stage, "upstream": up}))

    def is_current(self, stage: str) -> bool:
        if stage not in self._current:
            ok = all(self.is_current(u) for u in UPSTREAM[stage])
            rec = self.manifest.stages.get(stage)
            ok = ok and rec is not None and rec.key == self.stage_key(stage) and self.manifest.verify(self.root, stage)
            self._current[stage] = ok
        return self._current[stage]

    # ---- driver

    def run(self, target: str = "report", force: Sequence[str] = ()) -> RunManifest:
        """Run ``target`` and any upstream stage that is missing or stale."""
        if target not in STAGES:
            raise ConfigError(f"unknown stage {target!r}")
        for f in force:
            if f not in STAGES:
                raise ConfigError(f"unknown stage {f!r} for --stage-force")
        order = self._closure(target)
        try:
            for stage in order:
                if stage not in force and self.is_current(stage):
                    self.log(f"[skip] {stage} (up to date)")
                    continue
                self._run_stage(stage)
        finally:
            self.runner.close()
        return self.manifest

    def _closure(self, target: str) -> list[str]:
        need: set[str] = set()

        def visit(s):
            if s in need:
                return
            need.add(s)
            for u in UPSTREAM[s]:
                visit(u)
        visit(target)
        return [s for s in STAGES if s in need]

    def _run_stage(self, stage: str):
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        for old in d.glob("**/*"):
            if old.is_file():
                old.unlink()
        self.log(f"[run]  {stage}")
        fn = getattr(self, "_stage_" + stage.replace("-", "_"))
        try:
            written = fn(d)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - any failure halts with the stage name
            raise StageError(stage, d, f"{type(exc).__name__}: {exc}") from exc
        arts = {}
        for p in sorted(written):
            rel = p.relative_to(self.root).as_posix()
            arts[rel] = sha256_file(p)
        self.manifest.stages[stage] = StageRecord(self.stage_key(stage), arts)
        self._save_manifest()
        self._current = {stage: True}

    # ---- loaders (also used by report/tests)

    def model(self) -> NominalModel:
        return NominalModel.from_text((self.stage_dir("train-baseline") / "nominal_model.txt").read_text())

    def planner(self, model: NominalModel | None = None) -> Planner:
        return Planner(model or self.model(), self.cfg.planner, self.cfg.env)

    def encoder(self) -> Encoder:
        pca = PcaModel.from_text((self.stage_dir("fit-encoder") / "pca.txt").read_text())
        return Encoder(pca, self.cfg.window, self.cfg.featurizer_seed)

    def trajectories(self, name: str) -> list[Trajectory]:
        key = "traj:" + name
        if key not in self._cache:
            self._cache[key] = read_trajectories(self.stage_dir("collect") / f"{name}.jsonl")
        return self._cache[key]

    def embeddings(self, name: str, enc: Encoder | None = None) -> list[np.ndarray]:
        key = "emb:" + name
        if key not in self._cache:
            enc = enc or self.encoder()
            self._cache[key] = [enc.embed_episode(t.observations) for t in self.trajectories(name)]
        return self._cache[key]

    def clusters(self, name: str = "clusters") -> ClusterSet:
        return ClusterSet.from_text((self.stage_dir("build-centroids") / f"{name}.txt").read_text())

    def expert(self, method: str, label: str) -> ExpertParams:
        return ExpertParams.from_text((self.stage_dir("train-experts") / f"{method}_{label}.txt").read_text())

    @property
    def train_labels(self) -> list[str]:
        return [s.label for s in self.cfg.shift_specs("train")]

    @property
    def single_labels(self) -> list[str]:
        return [s.label for s in self.cfg.shift_specs("single")]

    def _invalidate(self, prefix: str):
        for k in [k for k in self._cache if k.startswith(prefix)]:
            del self._cache[k]

    # ---- stages

    def _stage_train_baseline(self, d: Path) -> list[Path]:
        env = self.cfg.env
        seeds = range(SYSID_BASE, SYSID_BASE + self.cfg.collect.sysid_episodes)
        sysid = self.runner.run(RandomActuation(), env, seeds, ID_SHIFT)
        model = fit_nominal_model(sysid, env)
        truth = NominalModel.from_params(env)
        p1 = d / "nominal_model.txt"
        p1.write_text(model.to_text())
        p2 = d / "sysid_fit.csv"
        rows = [("mass", truth.mass_hat, model.mass_hat), ("gravity", truth.gravity_hat, model.gravity_hat),
                ("gear", truth.gear_hat, model.gear_hat), ("friction", truth.friction_hat, model.friction_hat),
                ("damping", truth.damping_hat, model.damping_hat),
                ("one_step_mse", one_step_mse(truth, sysid, env.dt), one_step_mse(model, sysid, env.dt))]
        write_csv(p2, ["quantity", "true", "fitted"], rows)
        return [p1, p2]

    def _collect_specs(self) -> list[tuple[str, str, ShiftSpec, range, bool]]:
        """(file name, label, spec, seeds, exploratory) for every collection file."""
        c = self.cfg.collect
        out = [("ID", ID_LABEL, ID_SHIFT, range(COLLECT_BASE, COLLECT_BASE + c.id_episodes), False)]
        learn = self.cfg.shift_specs("train") + self.cfg.shift_specs("single")
        for k, sh in enumerate(learn, start=1):
            base = COLLECT_BASE + k * LABEL_STRIDE
            out.append((sh.label, sh.label, sh, range(base, base + c.shift_episodes), True))
        detect = [ID_SHIFT] + learn + self.cfg.shift_specs("novel")
        for k, sh in enumerate(detect):
            base = DETECT_BASE + k * LABEL_STRIDE
            out.append(("detect_" + sh.label, sh.label, sh, range(base, base + c.detect_episodes), False))
        for k, sh in enumerate(self.cfg.shift_specs("unseen")):
            base = UNSEEN_BASE + k * LABEL_STRIDE
            out.append(("unseen_" + sh.label, sh.label, sh, range(base, base + c.detect_episodes), False))
        return out

    def _stage_collect(self, d: Path) -> list[Path]:
        self._invalidate("traj:")
        self._invalidate("emb:")
        planner = self.planner()
        c = self.cfg.collect
        explorer = Explorer(planner, c.explore_scale, c.explore_block)
        written = []
        rows = []
        for name, label, sh, seeds, exploratory in self._collect_specs():
            trajs = self.runner.run(explorer if exploratory else planner, apply_shift(self.cfg.env, sh), seeds, sh)
            p = d / f"{name}.jsonl"
            write_trajectories(p, trajs)
            written.append(p)
            r = _returns(trajs)
            rows.append((name, label, seeds.start, len(seeds), int(exploratory), float(r.mean()),
                         float(r.std(ddof=1)) if len(r) > 1 else 0.0))
        p = d / "collection_summary.csv"
        write_csv(p, ["file", "label", "seed_base", "episodes", "exploratory", "mean_return", "std_return"], rows)
        return written + [p]

    def _training_files(self) -> list[str]:
        return [ID_LABEL] + self.train_labels + self.single_labels

    def _stage_fit_encoder(self, d: Path) -> list[Path]:
        self._invalidate("emb:")
        enc0 = Encoder(None, self.cfg.window, self.cfg.featurizer_seed)
        feats = np.vstack([enc0.raw_features(t.observations)
                           for name in self._training_files() for t in self.trajectories(name)])
        pca = fit_pca(feats, self.cfg.pca_dim)
        p1 = d / "pca.txt"
        p1.write_text(pca.to_text())
        total = float(np.trace(np.cov(feats, rowvar=False)))
        p2 = d / "explained_variance.csv"
        write_csv(p2, ["component", "eigenvalue", "fraction"],
                  [(i, float(e), float(e) / total) for i, e in enumerate(pca.eigenvalues)])
        return [p1, p2]

    def _stage_build_centroids(self, d: Path) -> list[Path]:
        enc = self.encoder()
        emb = {name: np.vstack(self.embeddings(name, enc)) for name in self._training_files()}
        keep = self.cfg.gating.id_keep
        cents = {ID_LABEL: compute_centroid(emb[ID_LABEL])}
        written = []

        def save(name: str, centroids: dict) -> ClusterSet:
            cs = ClusterSet(centroids)
            cs = ClusterSet(cs.centroids, calibrate_id_bias(emb[ID_LABEL], cs, keep))
            p = d / f"{name}.txt"
            p.write_text(cs.to_text())
            written.append(p)
            return cs

        joint = save("clusters", {**cents, **{lab: compute_centroid(emb[lab]) for lab in self.train_labels}})
        if self.train_labels:
            pooled = np.vstack([emb[lab] for lab in self.train_labels])
            save("clusters_dual", {**cents, POOLED: compute_centroid(pooled)})
            last = self.train_labels[-1]
            save(f"clusters_only_{last}", {**cents, last: compute_centroid(emb[last])})
        for lab in self.single_labels:
            save(f"clusters_{lab}", {**cents, lab: compute_centroid(emb[lab])})
        stats = routing_stats({k: emb[k] for k in self._training_files()}, joint)
        p = d / "routing_collection.csv"
        header = list(stats[0].keys())
        write_csv(p, header, ([r[k] for k in header] for r in stats))
        return written + [p]

    def _stage_mine_pairs(self, d: Path) -> list[Path]:
        enc = self.encoder()
        pc = self.cfg.pairs
        written, rows = [], []
        for lab in self.train_labels + self.single_labels:
            trajs, emb = self.trajectories(lab), self.embeddings(lab, enc)
            sets = {"naive": mine_pairs_naive(trajs, emb)}
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                sets["harder"] = mine_pairs_harder(trajs, emb, pc.contrast_quantile, pc.segment_len)
            for method, ps in sets.items():
                p = d / f"{method}_{lab}.csv"
                ps.to_csv(p)
                written.append(p)
                rows.append((method, lab, len(ps), float(ps.contrast.mean()) if len(ps) else math.nan))
        p = d / "pair_counts.csv"
        write_csv(p, ["method", "label", "pairs", "mean_contrast"], rows)
        return written + [p]

    def _stage_train_experts(self, d: Path) -> list[Path]:
        pairs_dir = self.stage_dir("mine-pairs")
        tc = self.cfg.train
        written, summary, curves = [], [], []

        def fit(method: str, label: str, ps: PairSet):
            if len(ps) == 0:
                raise StageError("train-experts", pairs_dir, f"no {method} pairs for {label!r}")
            res = train_expert(ps, tc, label)
            p = d / f"{method}_{label}.txt"
            p.write_text(res.params.to_text())
            written.append(p)
            summary.append((method, label, len(ps), float(res.loss_curve[-1]) if len(res.loss_curve) else math.nan,
                            preference_accuracy(res.params, ps)))
            curves.extend((method, label, e, float(v)) for e, v in enumerate(res.loss_curve))

        harder = {}
        for lab in self.train_labels + self.single_labels:
            for method in EXPERT_METHODS:
                ps = PairSet.from_csv(pairs_dir / f"{method}_{lab}.csv")
                if method == "harder":
                    harder[lab] = ps
                fit(method, lab, ps)
        if self.train_labels:
            fit("harder", POOLED, PairSet.concat([harder[lab] for lab in self.train_labels]))
            shifted = [t for lab in self.train_labels for t in self.trajectories(lab)]
            ft = finetune_nominal_model(self.model(), shifted, self.cfg.finetune.steps, self.cfg.finetune.lr,
                                        self.cfg.env.dt)
            p = d / "finetuned_model.txt"
            p.write_text(ft.to_text())
            written.append(p)
        p1 = d / "expert_summary.csv"
        write_csv(p1, ["method", "label", "pairs", "final_loss", "pref_acc"], summary)
        p2 = d / "loss_curves.csv"
        write_csv(p2, ["method", "label", "epoch", "loss"], curves)
        return written + [p1, p2]

    def _methods(self, planner: Planner, enc: Encoder) -> dict[str, object]:
        """Controllers evaluated on ID and the jointly routed shifts."""
        if not self.train_labels:
            return {}
        g = self.cfg.gating
        joint = self.clusters()
        out = {}
        for method in EXPERT_METHODS:
            experts = {lab: self.expert(method, lab) for lab in self.train_labels}
            out[method] = ExpertAgent(planner, enc, joint, experts, g.mode, designated=None, latch=g.latch)
        pooled = {POOLED: self.expert("harder", POOLED)}
        ft = NominalModel.from_text((self.stage_dir("train-experts") / "finetuned_model.txt").read_text())
        out["finetune"] = self.planner(ft)
        out["global"] = ExpertAgent(planner, enc, joint, pooled, "global", designated=POOLED)
        out["coarse"] = ExpertAgent(planner, enc, joint, pooled, "coarse", designated=POOLED, latch=g.latch)
        harder = {lab: self.expert("harder", lab) for lab in self.train_labels}
        out["random"] = ExpertAgent(planner, enc, joint, harder, "random", candidates=self.train_labels)
        out["dual"] = ExpertAgent(planner, enc, self.clusters("clusters_dual"), pooled, "jepa", latch=g.latch)
        last = self.train_labels[-1]
        out[f"only_{last}"] = ExpertAgent(planner, enc, self.clusters(f"clusters_only_{last}"),
                                          {last: harder[last]}, "jepa", latch=g.latch)
        return out

    def _stage_evaluate(self, d: Path) -> list[Path]:
        cfg = self.cfg
        planner = self.planner()
        enc = self.encoder()
        blocks = [("first", cfg.first)] + ([("second", cfg.second)] if cfg.second is not None else [])
        envs = [ID_SHIFT] + cfg.shift_specs("train")
        methods = self._methods(planner, enc)
        rows, base_rows, curves, routing = [], [], [], []

        def record(method, sh, block, base_trajs, trajs):
            for b, m in zip(base_trajs, trajs):
                rows.append((method, sh.label, block, b.seed, b.episode_return, m.episode_return,
                             _activation(m), int(all(r == ID_LABEL for r in m.routes) if m.routes[0] else 0),
                             int(_identical(b, m))))

        def cum_curve(method, env, trajs):
            mean_cum = np.cumsum(np.mean([t.rewards for t in trajs], axis=0))
            curves.extend((method, env, t + 1, float(v)) for t, v in enumerate(mean_cum))

        joint = self.clusters()
        for block, sb in blocks:
            for sh in envs:
                params = apply_shift(cfg.env, sh)
                base = self.runner.run(planner, params, sb.seeds, sh)
                base_rows.extend((sh.label, block, t.seed, t.episode_return) for t in base)
                if block == "first":
                    cum_curve("baseline", sh.label, base)
                    E = np.vstack([enc.embed_episode(t.observations) for t in base])
                    for r in routing_stats({sh.label: E}, joint):
                        routing.append(r)
                for name, ctrl in methods.items():
                    if block == "second" and name in ABLATIONS + ("dual", f"only_{self.train_labels[-1]}"):
                        continue
                    trajs = self.runner.run(ctrl, params, sb.seeds, sh)
                    record(name, sh, block, base, trajs)
                    if block == "first" and name == "harder":
                        cum_curve(name, sh.label, trajs)
        # single shifts: dedicated expert behind a two-way cluster set, first block only
        for sh in cfg.shift_specs("single"):
            params = apply_shift(cfg.env, sh)
            agent = ExpertAgent(planner, enc, self.clusters(f"clusters_{sh.label}"),
                                {sh.label: self.expert("harder", sh.label)}, "jepa", latch=cfg.gating.latch)
            base = self.runner.run(planner, params, cfg.first.seeds, sh)
            base_rows.extend((sh.label, "first", t.seed, t.episode_return) for t in base)
            record("harder", sh, "first", base, self.runner.run(agent, params, cfg.first.seeds, sh))
        p1 = d / "returns.csv"
        write_csv(p1, ["method", "env", "block", "seed", "baseline_return", "method_return", "activation",
                       "all_id", "identical"], rows)
        p2 = d / "baseline_returns.csv"
        write_csv(p2, ["env", "block", "seed", "return"], base_rows)
        p3 = d / "cumulative_returns.csv"
        write_csv(p3, ["method", "env", "step", "mean_cumulative_return"], curves)
        p4 = d / "routing_eval.csv"
        header = ["label", "reject_frac"] + [f"assign_{c}" for c in joint.shift_labels] + ["total_activation"]
        write_csv(p4, header, ([r[k] for k in header] for r in routing))
        return [p1, p2, p3, p4]

    def _stage_detect(self, d: Path) -> list[Path]:
        cfg, dc = self.cfg, self.cfg.detect
        enc = self.encoder()
        train = self.train_labels
        novel = [s.label for s in cfg.shift_specs("novel")]
        fit_id = np.vstack(self.embeddings(ID_LABEL, enc))
        held_id = np.vstack(self.embeddings("detect_" + ID_LABEL, enc))
        ood = {lab: np.vstack(self.embeddings("detect_" + lab, enc)) for lab in train + self.single_labels + novel}
        subsets = {lab: ood[lab] for lab in train}
        if novel:
            subsets["novel(" + _merged_labels([s.split("_x")[-1] for s in novel]) + ")"] = \
                np.vstack([ood[lab] for lab in novel])
        for lab in self.single_labels:
            subsets[lab] = ood[lab]
        if train or novel:
            subsets["all_ood"] = np.vstack([ood[lab] for lab in train + novel])
        rows, written = [], []
        roc_dir = d / "roc"
        roc_dir.mkdir(exist_ok=True)
        if subsets:
            detectors = {
                "mahalanobis": fit_mahalanobis(fit_id, dc.mahalanobis_lambda),
                f"gmm_k{dc.gmm_k}": fit_gmm(fit_id, dc.gmm_k, seed=dc.seed),
            }
            for name, det in detectors.items():
                s_id = det.score(held_id)
                cal = calibrate_threshold(s_id, dc.target_fpr)
                for sub, X in subsets.items():
                    s_ood = det.score(X)
                    rows.append((name, sub, roc_auc(s_id, s_ood), tpr_at_threshold(s_ood, cal.threshold),
                                 cal.threshold, cal.achieved_fpr, len(s_id), len(s_ood)))
                    pts = roc_curve(s_id, s_ood)
                    p = roc_dir / f"{name}__{sub}.csv"
                    write_csv(p, ["fpr", "tpr"], pts.tolist())
                    written.append(p)
        p1 = d / "id_rejection.csv"
        write_csv(p1, ["detector", "ood_subset", "auc", "tpr_at_tau", "tau", "achieved_fpr", "n_id", "n_ood"], rows)
        p2 = d / "subfamily.csv"
        write_csv(p2, ["method", "auc_known_vs_novel", "status"], self._subfamily(enc, train, novel, ood))
        return written + [p1, p2]

    def _subfamily(self, enc, train, novel, ood) -> list[tuple]:
        """Known-vs-novel OOD discrimination: fit on known-shift collection data, score held-out known vs novel."""
        dc = self.cfg.detect
        names = ([f"joint_gmm_k{k}" for k in dc.joint_gmm_ks] + ["percluster_gmm_bic", "mahalanobis"]
                 + [f"knn_k{k}" for k in dc.knn_ks] + ["isoforest", "ocsvm"])
        if not train or not novel:
            return [(n, "", "skipped: needs known and novel shifts") for n in names]
        known_fit = {lab: np.vstack(self.embeddings(lab, enc)) for lab in train}
        pooled = np.vstack(list(known_fit.values()))
        known_eval = np.vstack([ood[lab] for lab in train])
        novel_eval = np.vstack([ood[lab] for lab in novel])
        out = []

        def add(name, scorer):
            out.append((name, roc_auc(scorer(known_eval), scorer(novel_eval)), "ok"))

        for k in dc.joint_gmm_ks:
            add(f"joint_gmm_k{k}", fit_gmm(pooled, k, seed=dc.seed).score)
        per = [fit_gmm_bic(X, dc.bic_ks, seed=dc.seed) for X in known_fit.values()]
        add("percluster_gmm_bic", lambda X: np.min(np.stack([m.score(X) for m in per]), axis=0))
        add("mahalanobis", fit_mahalanobis(pooled, dc.mahalanobis_lambda).score)
        ref = _stride(pooled, dc.knn_max_reference)
        for k in dc.knn_ks:
            add(f"knn_k{k}", fit_knn(ref, k).score)
        add("isoforest", fit_isoforest(pooled, dc.iso_trees, dc.iso_subsample, seed=dc.seed).score)
        out.append(("ocsvm", "", "not implemented"))
        return out

    def _stage_diagnose(self, d: Path) -> list[Path]:
        cfg = self.cfg
        enc = self.encoder()
        train = self.train_labels
        novel = [s.label for s in cfg.shift_specs("novel")]
        geo_labels = [ID_LABEL] + train + novel
        geo = {lab: np.vstack(self.embeddings("detect_" + lab, enc)) for lab in geo_labels}
        written = []
        if len(geo_labels) > 1:
            gcs = ClusterSet({lab: compute_centroid(X) for lab, X in geo.items()})
            labels, C = centroid_cosine_matrix(gcs)
            p = d / "centroid_cosine.csv"
            write_csv(p, ["label", *labels], ([labels[i], *C[i].tolist()] for i in range(len(labels))))
            written.append(p)
            p = d / "spread_ratio.csv"
            write_csv(p, ["label", "spread", "ratio_vs_id", "ratio_vs_nearest_ood", "flagged"],
                      ((r.label, r.spread, r.ratio_vs_id, r.ratio_vs_nearest_ood, int(r.flagged))
                       for r in spread_ratio(geo, gcs)))
            written.append(p)
        if train and novel:
            known = np.vstack([geo[lab] for lab in train])
            nov = np.vstack([geo[lab] for lab in novel])
            top = rank_dims(known, nov, 3)
            p = d / "ks_dims.csv"
            write_csv(p, ["rank", "dim", "ks"], ((i + 1, j, ks) for i, (j, ks) in enumerate(top)))
            written.append(p)
            hist = []
            for j, _ in top:
                lo = min(float(X[:, j].min()) for X in geo.values())
                hi = max(float(X[:, j].max()) for X in geo.values())
                edges = np.linspace(lo, hi, 41)
                for lab, X in geo.items():
                    dens, _ = np.histogram(X[:, j], bins=edges, density=True)
                    hist.extend((j, lab, float((edges[i] + edges[i + 1]) / 2), float(dens[i])) for i in range(40))
            p = d / "ks_density.csv"
            write_csv(p, ["dim", "label", "bin_center", "density"], hist)
            written.append(p)
        # suitability from the first-block baseline returns
        base = read_csv(self.stage_dir("evaluate") / "baseline_returns.csv")
        first = {}
        for r in base:
            if r["block"] == "first":
                first.setdefault(r["env"], []).append(float(r["return"]))
        id_mean = float(np.mean(first[ID_LABEL]))
        sc = cfg.suitability
        rows = []
        for lab in train + self.single_labels:
            s = shift_suitability(first[lab], id_mean, sc.max_cv, sc.degradation)
            rows.append((lab, s.mean, s.std, s.std_over_mean, s.mean / id_mean, int(s.degraded), int(s.suitable),
                         int(s.flagged)))
        p = d / "suitability.csv"
        write_csv(p, ["label", "mean", "std", "std_over_mean", "mean_over_id", "degraded", "suitable", "flagged"],
                  rows)
        written.append(p)
        # distances from unseen (and trained) shift embeddings to the routing centroids
        joint = self.clusters()
        dist_sets = {ID_LABEL: geo[ID_LABEL]}
        dist_sets.update({lab: geo[lab] for lab in train})
        for sh in cfg.shift_specs("unseen"):
            dist_sets[sh.label] = np.vstack(self.embeddings("unseen_" + sh.label, enc))
        table = centroid_distance_table(joint, dist_sets)
        p = d / "centroid_distances.csv"
        header = list(table[0].keys())
        write_csv(p, header, ([r[k] for k in header] for r in table))
        written.append(p)
        # 2-D scatter for plotting, every 10th step
        pts = []
        for lab, X in geo.items():
            P = project2d(X[::10])
            pts.extend((lab, float(a), float(b)) for a, b in P)
        p = d / "pca2d.csv"
        write_csv(p, ["label", "pc1", "pc2"], pts)
        written.append(p)
        return written

    def _stage_report(self, d: Path) -> list[Path]:
        from .report import write_report
        return write_report(self.root, d, self.cfg)


def run_pipeline(cfg: ExperimentConfig, out_dir: Path | str | None = None, jobs: int = 1,
                 force: Sequence[str] = (), target: str = "report",
                 log: Callable[[str], None] | None = None) -> RunManifest:
    return Pipeline(cfg, out_dir, jobs, log).run(target, force)
