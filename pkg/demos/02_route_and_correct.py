"""Grow one residual expert for a heavy-mass shift and route to it.

Walks the core loop by hand at small scale. Collect nominal and shifted
episodes, embed observation windows, place centroids, calibrate the ID reject
bias, mine harder preference pairs, train a bounded residual expert and
compare against the bare planner on the same seeds.

    python demos/02_route_and_correct.py
"""

import numpy as np

from expertgrowth.agent import ExpertAgent
from expertgrowth.config import load_config
from expertgrowth.controller import Explorer, NominalModel, Planner
from expertgrowth.encoder import Encoder, fit_pca
from expertgrowth.evalstats import bootstrap_deltas
from expertgrowth.expert import mine_pairs_harder, preference_accuracy, train_expert
from expertgrowth.indexer import ClusterSet, calibrate_id_bias, compute_centroid, routing_stats
from expertgrowth.shiftenv import ID_SHIFT, ShiftSpec, apply_shift, run_episode

cfg = load_config()
env = cfg.env
heavy = ShiftSpec.parse("torso_mass_x5")
planner = Planner(NominalModel.from_params(env), cfg.planner, env)

id_trajs = [run_episode(planner, env, s) for s in range(501000, 501015)]
explorer = Explorer(planner, cfg.collect.explore_scale, cfg.collect.explore_block)
x5_trajs = [run_episode(explorer, apply_shift(env, heavy), s, heavy) for s in range(520000, 520030)]

enc0 = Encoder(None)
feats = np.vstack([enc0.raw_features(t.observations) for t in id_trajs + x5_trajs])
enc = Encoder(fit_pca(feats, cfg.pca_dim))
emb_id = [enc.embed_episode(t.observations) for t in id_trajs]
emb_x5 = [enc.embed_episode(t.observations) for t in x5_trajs]

clusters = ClusterSet({"ID": compute_centroid(np.vstack(emb_id)), heavy.label: compute_centroid(np.vstack(emb_x5))})
clusters = ClusterSet(clusters.centroids, calibrate_id_bias(np.vstack(emb_id), clusters, cfg.gating.id_keep))
print(f"ID reject bias {clusters.id_bias:.3f}")
for row in routing_stats({"ID": np.vstack(emb_id), heavy.label: np.vstack(emb_x5)}, clusters):
    print(f"  {row['label']:14s} routed to ID {row['reject_frac']:.2f}")

pairs = mine_pairs_harder(x5_trajs, emb_x5, cfg.pairs.contrast_quantile, cfg.pairs.segment_len)
expert = train_expert(pairs, cfg.train, heavy.label).params
print(f"{len(pairs)} harder pairs, preference accuracy {preference_accuracy(expert, pairs):.3f}")

agent = ExpertAgent(planner, enc, clusters, {heavy.label: expert}, latch=cfg.gating.latch)
seeds = range(109000, 109012)
for sh in (ID_SHIFT, heavy):
    p = apply_shift(env, sh)
    base = np.array([run_episode(planner, p, s, sh).episode_return for s in seeds])
    ours = np.array([run_episode(agent, p, s, sh).episode_return for s in seeds])
    s = bootstrap_deltas(ours - base, B=2000)
    print(f"{sh.label:14s} paired delta {s.delta:+7.2f}  95% CI [{s.ci_low:+.2f}, {s.ci_high:+.2f}]  "
          f"p {s.p_two_sided:.4f} {s.label}")
