"""Turn stage artifacts into result tables (CSV plus fixed-width text)."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .evalstats import (PERCENTILES, format_table, paired_bootstrap, percentile_delta,
                        read_paired_csv, reuse_delta, summary_row, write_summary_csv)
from .shiftenv import ID_LABEL
from .textio import fmt, read_csv, write_csv

REQUIRED = {
    "evaluate": ["returns.csv", "baseline_returns.csv", "routing_eval.csv", "cumulative_returns.csv"],
    "detect": ["id_rejection.csv", "subfamily.csv"],
    "diagnose": ["suitability.csv", "centroid_distances.csv", "pca2d.csv"],
    "train-experts": ["expert_summary.csv"],
}

METADATA = """\
statistic conventions
  bootstrap: B={B} resamples, RandomState({seed}).randint index matrix shared by mean and IQM
  p_two_sided: 2*min(frac(mean*<=0), frac(mean*>=0)) clamped to [1/B, 1]
  confidence interval: 2.5/97.5 percentiles, linear interpolation at (n-1)p/100
  IQM: floor(n/4) dropped from each end; reported as IQM of per-seed deltas (not delta of IQMs)
  P(improve): (#d>0 + 0.5 #d=0)/n
  spread ratio: mean Euclidean distance to own centroid / centroid distance
routing
  gating mode: {mode}; latch: {latch}; id_bias calibrated to keep {keep} of ID collection steps
  suitability: std/mean < {max_cv} and mean < {deg} x ID mean
"""


class ReportError(RuntimeError):
    def __init__(self, missing: list[str]):
        super().__init__("missing artifacts:\n  " + "\n  ".join(missing))
        self.missing = missing


def missing_artifacts(root: Path | str) -> list[str]:
    root = Path(root)
    return [f"{stage}/{name}" for stage, names in REQUIRED.items() for name in names
            if not (root / stage / name).exists()]


def _fixed(rows: list[list], header: list[str]) -> str:
    cells = [[str(h) for h in header]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return f"{v:+.3f}" if abs(v) < 1e4 else f"{v:.4g}"
    return str(v)


def _emit(out: Path, name: str, header: list[str], rows: list[list], title: str, written: list[Path],
          texts: list[str], note: str = "") -> None:
    p = out / f"{name}.csv"
    write_csv(p, header, rows)
    written.append(p)
    body = f"== {title} ==\n" + (_fixed(rows, header) if rows else "(no rows)\n")
    if note:
        body += note.rstrip() + "\n"
    texts.append(body)


def write_report(root: Path | str, out: Path | str, cfg: ExperimentConfig) -> list[Path]:
    root, out = Path(root), Path(out)
    missing = missing_artifacts(root)
    if missing:
        raise ReportError(missing)
    out.mkdir(parents=True, exist_ok=True)
    B, seed = cfg.bootstrap.B, cfg.bootstrap.seed
    written: list[Path] = []
    texts: list[str] = []
    samples = read_paired_csv(root / "evaluate" / "returns.csv")
    summaries = {k: paired_bootstrap(s, B, seed) for k, s in samples.items()}
    train = [s.label for s in cfg.shift_specs("train")]
    single = [s.label for s in cfg.shift_specs("single")]
    envs = [ID_LABEL] + train
    have_second = any(k[2] == "second" for k in samples)

    # all cells, full precision
    rows = [summary_row(k[0], samples[k], summaries[k]) for k in sorted(summaries)]
    p = out / "bootstrap_summary.csv"
    write_summary_csv(p, rows)
    written.append(p)

    # Table 1: naive vs harder, both blocks
    t1 = [r for r in rows if r["method"] in ("naive", "harder") and r["env"] in envs]
    p = out / "table1_main.csv"
    write_summary_csv(p, t1)
    written.append(p)
    texts.append("== Table 1: paired delta vs baseline (naive / harder pairs) ==\n" + format_table(t1))

    # Table 2: second-vs-first reuse
    if have_second:
        t2 = []
        for method in ("naive", "harder"):
            for env in envs:
                a, b = samples.get((method, env, "first")), samples.get((method, env, "second"))
                if a is None or b is None:
                    continue
                s = reuse_delta(a, b, B, seed)
                s2 = summaries[(method, env, "second")]
                t2.append([method, env, s2.delta, s2.p_two_sided, s2.label, s.delta, s.ci_low, s.ci_high,
                           s.p_two_sided, int(s.ci_low <= 0 <= s.ci_high)])
        _emit(out, "table2_reuse", ["method", "env", "second_delta", "second_p", "second_sig", "reuse_delta",
                                    "reuse_ci_low", "reuse_ci_high", "reuse_p", "ci_contains_zero"], t2,
              "Table 2: second-block delta and second-minus-first reuse delta", written, texts)
    else:
        texts.append("== Table 2 ==\nsecond seed block not configured; reuse table omitted\n")

    # Table 3: percentile deltas, harder, first block
    t3 = []
    for env in envs:
        s = samples.get(("harder", env, "first"))
        if s is None:
            continue
        pd = percentile_delta(s.method, s.baseline, PERCENTILES)
        t3.append([env, *[pd[q] for q in PERCENTILES]])
    _emit(out, "table3_percentiles", ["env", *[f"p{q}" for q in PERCENTILES]], t3,
          "Table 3: per-percentile return difference (harder, first block)", written, texts)

    # Table 4: suitability plus the dedicated experts
    suit = {r["label"]: r for r in read_csv(root / "diagnose" / "suitability.csv")}
    acc = {(r["method"], r["label"]): r for r in read_csv(root / "train-experts" / "expert_summary.csv")}
    t4 = []
    for lab in train + single:
        sr = suit[lab]
        key = ("harder", lab, "first")
        s = summaries.get(key)
        a = acc.get(("harder", lab))
        t4.append([lab, float(sr["mean"]), float(sr["std"]), float(sr["std_over_mean"]), float(sr["mean_over_id"]),
                   "yes" if sr["suitable"] == "1" else "no", float(a["pref_acc"]) if a else math.nan,
                   s.delta if s else math.nan, s.p_two_sided if s else math.nan, s.label if s else ""])
    _emit(out, "table4_suitability", ["shift", "baseline_mean", "baseline_std", "std_over_mean", "mean_over_id",
                                      "suitable", "pref_acc", "expert_delta", "p", "sig"], t4,
          "Table 4: shift suitability and dedicated-expert result", written, texts)

    # Table 5: routing fractions on baseline evaluation episodes, plus latched activation
    rt = read_csv(root / "evaluate" / "routing_eval.csv")
    ret = read_csv(root / "evaluate" / "returns.csv")
    act = {}
    for r in ret:
        if r["method"] == "harder" and r["block"] == "first":
            act.setdefault(r["env"], []).append(float(r["activation"]))
    header5 = list(rt[0].keys()) + ["agent_activation"] if rt else []
    t5 = [[r[k] if k == "label" else float(r[k]) for k in rt[0].keys()]
          + [float(np.mean(act[r["label"]])) if r["label"] in act else math.nan] for r in rt]
    _emit(out, "table5_routing", header5, t5,
          "Table 5: per-step routing of baseline evaluation episodes; agent_activation is the latched agent",
          written, texts)

    # Table 6: distances to centroids
    cd = read_csv(root / "diagnose" / "centroid_distances.csv")
    if cd:
        h6 = list(cd[0].keys())
        t6 = [[r[k] if k in ("label", "nearest") else float(r[k]) for k in h6] for r in cd]
        _emit(out, "table6_centroid_distances", h6, t6,
              "Table 6: mean distance from each shift's embeddings to the routing centroids", written, texts)

    # Table 7: ablations, first block
    abl = [m for m in sorted({k[0] for k in samples}) if m not in ("naive", "harder")]
    t7 = [r for r in rows if r["block"] == "first" and r["env"] in envs and r["method"] in abl + ["harder"]]
    p = out / "table7_ablations.csv"
    write_summary_csv(p, t7)
    written.append(p)
    texts.append("== Table 7: ablations and routing variants (first block) ==\n" + format_table(t7))

    # Table 8: detailed statistics
    t8 = [[r["method"], r["env"], r["block"], r["delta"], r["ci_low"], r["ci_high"], r["iqm_delta"],
           r["iqm_ci_low"], r["iqm_ci_high"], r["p_improve"], r["p_two_sided"], r["label"]]
          for r in rows if r["method"] in ("naive", "harder")]
    _emit(out, "table8_detailed", ["method", "env", "block", "delta", "ci_low", "ci_high", "iqm_delta",
                                   "iqm_ci_low", "iqm_ci_high", "p_improve", "p", "sig"], t8,
          "Table 8: detailed bootstrap statistics", written, texts)

    # detection and geometry
    idr = read_csv(root / "detect" / "id_rejection.csv")
    t9 = [[r["detector"], r["ood_subset"], float(r["auc"]), float(r["tpr_at_tau"]), float(r["tau"]),
           float(r["achieved_fpr"])] for r in idr]
    _emit(out, "detection_id_rejection", ["detector", "ood_subset", "auc", "tpr_at_tau", "tau", "achieved_fpr"],
          t9, f"ID rejection (threshold at {cfg.detect.target_fpr:g} ID false-positive rate)", written, texts)
    sf = read_csv(root / "detect" / "subfamily.csv")
    t10 = [[r["method"], float(r["auc_known_vs_novel"]) if r["auc_known_vs_novel"] else "", r["status"]]
           for r in sf]
    _emit(out, "detection_subfamily", ["method", "auc_known_vs_novel", "status"], t10,
          "Known vs novel OOD sub-family discrimination", written, texts)
    for name, title in (("centroid_cosine", "Centroid cosine similarity"),
                        ("spread_ratio", "Within-cluster spread over centroid separation"),
                        ("ks_dims", "Top KS dimensions (known vs novel OOD)")):
        src = root / "diagnose" / f"{name}.csv"
        if src.exists():
            rr = read_csv(src)
            if rr:
                h = list(rr[0].keys())
                _emit(out, f"geometry_{name}", h, [[_num(r[k]) for k in h] for r in rr], title, written, texts)

    # plot-ready data lives with its stage; index it here
    plots = sorted(
        [p.relative_to(root).as_posix() for p in (root / "detect" / "roc").glob("*.csv")]
        + [f"diagnose/{n}" for n in ("pca2d.csv", "ks_density.csv") if (root / "diagnose" / n).exists()]
        + ["evaluate/cumulative_returns.csv"])
    p = out / "plot_index.csv"
    write_csv(p, ["path"], [[x] for x in plots])
    written.append(p)

    meta = METADATA.format(B=B, seed=seed, mode=cfg.gating.mode, latch=cfg.gating.latch, keep=fmt(cfg.gating.id_keep),
                           max_cv=fmt(cfg.suitability.max_cv), deg=fmt(cfg.suitability.degradation))
    if not train:
        texts.insert(0, "no shifts configured: ID-only report, no experts trained\n")
    p = out / "report.txt"
    p.write_text(meta + "\n" + "\n".join(texts))
    written.append(p)
    return written


def _num(v: str):
    try:
        return float(v)
    except ValueError:
        return v
