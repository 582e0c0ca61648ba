"""How the baseline planner degrades when the plant changes under it.

The planner plans with a model fitted on nominal data. We run it on the
nominal plant and on a few dynamics shifts, then classify each shift with the
Std/Mean suitability rule that decides whether a shift is worth an expert.

    python demos/01_shifted_plant.py
"""

import numpy as np

from expertgrowth.config import load_config
from expertgrowth.controller import NominalModel, Planner, RandomActuation, fit_nominal_model
from expertgrowth.geomdiag import shift_suitability
from expertgrowth.shiftenv import ID_SHIFT, ShiftSpec, apply_shift, run_episode

cfg = load_config()
env = cfg.env

# system identification from random actuation on the nominal plant
sysid = [run_episode(RandomActuation(), env, s) for s in range(5)]
model = fit_nominal_model(sysid, env)
truth = NominalModel.from_params(env)
print(f"fitted mass {model.mass_hat:.3f} (true {truth.mass_hat}), gear {model.gear_hat:.3f} (true {truth.gear_hat})")

planner = Planner(model, cfg.planner, env)
seeds = range(109000, 109008)
returns = {}
for label in ["ID", "torso_mass_x3", "torso_mass_x5", "gear_x0.3"]:
    sh = ID_SHIFT if label == "ID" else ShiftSpec.parse(label)
    returns[label] = np.array([run_episode(planner, apply_shift(env, sh), s, sh).episode_return for s in seeds])
    print(f"{label:14s} mean return {returns[label].mean():7.2f}  std {returns[label].std(ddof=1):6.2f}")

id_mean = returns["ID"].mean()
for label in ["torso_mass_x3", "torso_mass_x5", "gear_x0.3"]:
    s = shift_suitability(returns[label], id_mean, cfg.suitability.max_cv, cfg.suitability.degradation)
    print(f"{label:14s} std/mean {s.std_over_mean:.3f}  suitable: {s.suitable}")
