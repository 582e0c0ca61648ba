"""Run the staged pipeline at reduced scale and read the detection results.

Each stage writes its artifacts under the run directory and is skipped on the
next invocation unless its inputs changed. After the run we refit the
Mahalanobis ID detector by hand to show what the detect stage computes.
Dropping the gravity shift changes the PCA fit population, so the mass x3
result here differs from the default run; that sensitivity is part of the
picture.

    python demos/03_pipeline_and_detection.py [RUN_DIR]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from expertgrowth.config import config_from_dict
from expertgrowth.ooddet import calibrate_threshold, fit_mahalanobis, roc_auc, tpr_at_threshold
from expertgrowth.pipeline import Pipeline, run_pipeline

# training data stays at full size; with a handful of collection episodes the
# experts are unreliable and routinely hurt the shifted plant
small = {
    "collect": {"detect_episodes": 6},
    "first": {"base": 109000, "count": 10},
    "second": {"base": 200000, "count": 10},
    "bootstrap": {"B": 2000},
    "detect": {"gmm_k": 6, "bic_ks": [1, 2, 3, 4], "iso_trees": 40},
    "shifts": {"single": ["gear_x0.3"], "unseen": []},
}
cfg = config_from_dict(small)
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "run"

run_pipeline(cfg, out, log=print)
# second call: every stage is current, so nothing recomputes
run_pipeline(cfg, out, log=print)

text = (out / "report" / "report.txt").read_text()
start = text.index("== Table 1")
print(text[start:text.index("== Table 2")])

pipe = Pipeline(cfg, out)
enc = pipe.encoder()
fit = np.vstack(pipe.embeddings("ID", enc))
held = np.vstack(pipe.embeddings("detect_ID", enc))
det = fit_mahalanobis(fit, cfg.detect.mahalanobis_lambda)
cal = calibrate_threshold(det.score(held), cfg.detect.target_fpr)
for label in ["torso_mass_x3", "torso_mass_x5", "torso_mass_x6"]:
    s = det.score(np.vstack(pipe.embeddings("detect_" + label, enc)))
    print(f"{label:14s} AUC {roc_auc(det.score(held), s):.3f}  TPR at 5% FPR {tpr_at_threshold(s, cal.threshold):.3f}")
